#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "rba/error.hpp"

namespace rba {

// Dense row-major tensor of doubles with an explicit, positive shape.
// Scalars are rank 0. All primitives check shapes; nothing broadcasts
// silently (broadcast is explicit via expand_axis / matmul batch dims).

using Shape = std::vector<int>;
using Rng = std::mt19937_64;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);  // throws ShapeError on extent <= 0

namespace detail {

struct TensorData {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a backward pass touches it
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);
  static Tensor scalar(double v);
  static Tensor from_data(std::shared_ptr<detail::TensorData> data);

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return data_->shape; }
  int rank() const { return static_cast<int>(data_->shape.size()); }
  int extent(int axis) const;
  std::size_t numel() const { return data_->value.size(); }

  std::vector<double>& values() { return data_->value; }
  const std::vector<double>& values() const { return data_->value; }
  double value() const;                            // scalar read
  double at(std::initializer_list<int> index) const;

  bool requires_grad() const { return data_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return data_ && !data_->grad.empty(); }
  const std::vector<double>& grad() const;  // TapeError when absent
  void zero_grad();

  std::shared_ptr<detail::TensorData> data() const { return data_; }

 private:
  std::shared_ptr<detail::TensorData> data_;
};

// Dynamic tape: ops executed while a Tape is alive (on this thread) record
// backward steps; Tape::backward replays them in exact reverse order.
// One backward per tape; a second replay is a contract error.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void backward(const Tensor& loss);
  std::size_t recorded() const { return steps_.size(); }
  bool replayed() const { return replayed_; }

  static Tape* active();
  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

 private:
  std::vector<std::function<void()>> steps_;
  bool replayed_ = false;
};

void backward(const Tensor& loss, Tape& tape);

// --- construction -----------------------------------------------------

Tensor zeros(Shape shape);
Tensor ones(Shape shape);
Tensor full(Shape shape, double v);
Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
Tensor rand_uniform(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0);

// --- elementwise ------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // b must be nonzero everywhere
Tensor add_scalar(const Tensor& x, double c);
Tensor scale(const Tensor& x, double c);
Tensor neg(const Tensor& x);

Tensor exp(const Tensor& x);    // output must stay finite
Tensor log(const Tensor& x);    // x > 0 elementwise
Tensor sqrt(const Tensor& x);   // x >= 0 elementwise
Tensor square(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor logistic(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor clamp_min(const Tensor& x, double floor);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }
inline Tensor operator+(const Tensor& x, double c) { return add_scalar(x, c); }
inline Tensor operator+(double c, const Tensor& x) { return add_scalar(x, c); }
inline Tensor operator-(const Tensor& x, double c) { return add_scalar(x, -c); }
inline Tensor operator*(const Tensor& x, double c) { return scale(x, c); }
inline Tensor operator*(double c, const Tensor& x) { return scale(x, c); }

// --- structure --------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);  // swaps the last two axes
Tensor expand_axis(const Tensor& x, int axis, int times);  // explicit broadcast
Tensor expand_leading(Tensor x, const Shape& leading);     // prepend + repeat
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int start, int length);
Tensor embedding(const Tensor& table, const std::vector<std::vector<int>>& ids);

// --- contraction / normalization ---------------------------------------

// Batched matrix product; leading (batch) extents broadcast numpy-style.
// exact_accumulate sums each inner product with ExactSum so the result is
// independent of the contraction order of the inputs' rows.
Tensor matmul(const Tensor& a, const Tensor& b, bool exact_accumulate = false);

Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);

Tensor reduce_sum(const Tensor& x, int axis);
Tensor reduce_mean(const Tensor& x, int axis);
Tensor reduce_max(const Tensor& x, int axis);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// --- verification -------------------------------------------------------

void check_finite(const Tensor& t, const char* context);

// Max over coordinates of |analytic - central difference| relative error,
// with the analytic gradient taken from a fresh tape and the differences
// evaluated at x +- h per coordinate. f must return a scalar tensor.
double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x, double step = 1e-5);

}  // namespace rba
