#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "rba/tensor.hpp"

namespace testutil {

inline double max_abs_diff(const std::vector<double>& a,
                           const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::fabs(a[i] - b[i]));
  }
  return m;
}

inline double max_abs_diff(const rba::Tensor& a, const rba::Tensor& b) {
  return max_abs_diff(a.values(), b.values());
}

inline bool bit_identical(const rba::Tensor& a, const rba::Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (a.values()[i] != b.values()[i]) return false;
  }
  return true;
}

}  // namespace testutil
