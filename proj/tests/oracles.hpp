#pragma once

// Independent straight-line reference implementations used as test oracles.
// These are deliberately written with plain nested vectors and direct loops,
// transcribed from the routing algorithms' printed form, and stay independent
// of the tensor/tape implementation they check.

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;           // [rows][cols]
using VoteCube = std::vector<Mat>;      // [h][n][i]

inline Mat matmul(const Mat& a, const Mat& b) {
  const std::size_t m = a.size(), k = a[0].size(), n = b[0].size();
  Mat out(m, Vec(n, 0.0));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t kk = 0; kk < k; ++kk) out[i][j] += a[i][kk] * b[kk][j];
    }
  }
  return out;
}

inline Vec softmax(const Vec& x) {
  Vec e(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    e[i] = std::exp(x[i]);
    s += e[i];
  }
  for (double& v : e) v /= s;
  return e;
}

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Vec squash(const Vec& s) {
  double n2 = 0.0;
  for (double v : s) n2 += v * v;
  Vec out(s.size(), 0.0);
  if (n2 == 0.0) return out;
  const double factor = std::sqrt(n2) / (1.0 + n2);
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = s[i] * factor;
  return out;
}

// softmax(Q K^T / sqrt(dk)) V evaluated directly.
inline Mat scaled_dot_attention(const Mat& q, const Mat& k, const Mat& v) {
  const std::size_t rows = q.size(), keys = k.size(), dk = q[0].size();
  Mat out(rows, Vec(v[0].size(), 0.0));
  for (std::size_t j = 0; j < rows; ++j) {
    Vec logits(keys, 0.0);
    for (std::size_t m = 0; m < keys; ++m) {
      for (std::size_t c = 0; c < dk; ++c) logits[m] += q[j][c] * k[m][c];
      logits[m] /= std::sqrt(static_cast<double>(dk));
    }
    const Vec w = softmax(logits);
    for (std::size_t m = 0; m < keys; ++m) {
      for (std::size_t c = 0; c < v[0].size(); ++c) out[j][c] += w[m] * v[m][c];
    }
  }
  return out;
}

// Weighted mean of votes for one output capsule: sum_h C_h V_h / sum_h C_h.
inline Vec weighted_vote_mean(const Vec& c, const Mat& votes, double denom_eps) {
  const std::size_t dims = votes[0].size();
  double denom = 0.0;
  for (double w : c) denom += w;
  denom = std::max(denom, denom_eps);
  Vec out(dims, 0.0);
  for (std::size_t h = 0; h < votes.size(); ++h) {
    for (std::size_t i = 0; i < dims; ++i) out[i] += c[h] * votes[h][i];
  }
  for (double& v : out) v /= denom;
  return out;
}

struct SimpleRoutingOracle {
  Mat capsules;                 // [n][i]
  Mat coupling;                 // final C, [h][n]
  std::vector<Mat> coupling_history;
};

// Iterative simple routing, one statement per pseudocode line.
inline SimpleRoutingOracle simple_routing(const VoteCube& votes, int iterations,
                                          double denom_eps = 1e-12) {
  const std::size_t h_count = votes.size();
  const std::size_t n_count = votes[0].size();
  const std::size_t dims = votes[0][0].size();
  Mat logits(h_count, Vec(n_count, 0.0));
  Mat coupling(h_count, Vec(n_count, 0.0));
  Mat capsules(n_count, Vec(dims, 0.0));
  SimpleRoutingOracle result;
  for (int t = 0; t < iterations; ++t) {
    for (std::size_t h = 0; h < h_count; ++h) coupling[h] = softmax(logits[h]);
    for (std::size_t n = 0; n < n_count; ++n) {
      Vec c(h_count);
      Mat v(h_count);
      for (std::size_t h = 0; h < h_count; ++h) {
        c[h] = coupling[h][n];
        v[h] = votes[h][n];
      }
      capsules[n] = squash(weighted_vote_mean(c, v, denom_eps));
    }
    for (std::size_t h = 0; h < h_count; ++h) {
      for (std::size_t n = 0; n < n_count; ++n) {
        double dot = 0.0;
        for (std::size_t i = 0; i < dims; ++i) dot += capsules[n][i] * votes[h][n][i];
        logits[h][n] += dot;
      }
    }
    result.coupling_history.push_back(coupling);
  }
  result.capsules = capsules;
  result.coupling = coupling;
  return result;
}

enum class EStepDensity { kProduct, kSumLiteral };

struct EmRoutingOracle {
  Mat capsules;   // [n][i] = A_n * mu_n
  Mat mu;
  Mat sigma2;
  Vec activation;
  Vec chi;
  Mat coupling;
  std::vector<Mat> coupling_history;
};

inline EmRoutingOracle em_routing(const VoteCube& votes,
                                  const std::vector<double>& lambda_schedule,
                                  const Vec& beta_a, const Vec& beta_mu,
                                  double variance_floor = 1e-6,
                                  double denom_eps = 1e-12,
                                  EStepDensity density = EStepDensity::kProduct) {
  const std::size_t h_count = votes.size();
  const std::size_t n_count = votes[0].size();
  const std::size_t dims = votes[0][0].size();
  const double two_pi = 2.0 * 3.14159265358979323846;
  Mat coupling(h_count, Vec(n_count, 1.0 / static_cast<double>(n_count)));
  Mat mu(n_count, Vec(dims, 0.0));
  Mat sigma2(n_count, Vec(dims, 0.0));
  Vec activation(n_count, 0.0);
  Vec chi(n_count, 0.0);
  EmRoutingOracle result;
  for (double lambda : lambda_schedule) {
    // M-step
    for (std::size_t n = 0; n < n_count; ++n) {
      double denom = 0.0;
      for (std::size_t h = 0; h < h_count; ++h) denom += coupling[h][n];
      const double guarded = std::max(denom, denom_eps);
      for (std::size_t i = 0; i < dims; ++i) {
        double s = 0.0;
        for (std::size_t h = 0; h < h_count; ++h) s += coupling[h][n] * votes[h][n][i];
        mu[n][i] = s / guarded;
      }
      for (std::size_t i = 0; i < dims; ++i) {
        double s = 0.0;
        for (std::size_t h = 0; h < h_count; ++h) {
          const double d = votes[h][n][i] - mu[n][i];
          s += coupling[h][n] * d * d;
        }
        sigma2[n][i] = std::max(s / guarded, variance_floor);
      }
      double cost = 0.0;
      for (std::size_t i = 0; i < dims; ++i) {
        cost += std::log(std::sqrt(sigma2[n][i])) + (1.0 + std::log(two_pi)) / 2.0;
      }
      chi[n] = cost * denom;
      activation[n] = logistic(lambda * (beta_a[n] - beta_mu[n] * denom - chi[n]));
    }
    // E-step
    for (std::size_t h = 0; h < h_count; ++h) {
      Vec weight(n_count, 0.0);
      double total = 0.0;
      for (std::size_t n = 0; n < n_count; ++n) {
        double p;
        if (density == EStepDensity::kProduct) {
          p = 1.0;
          for (std::size_t i = 0; i < dims; ++i) {
            const double d = votes[h][n][i] - mu[n][i];
            p *= std::exp(-d * d / (2.0 * sigma2[n][i])) /
                 std::sqrt(two_pi * sigma2[n][i]);
          }
        } else {
          p = 0.0;
          for (std::size_t i = 0; i < dims; ++i) {
            const double d = votes[h][n][i] - mu[n][i];
            p += std::exp(-d * d / (2.0 * sigma2[n][i])) /
                 std::sqrt(two_pi * sigma2[n][i]);
          }
        }
        weight[n] = activation[n] * p;
        total += weight[n];
      }
      for (std::size_t n = 0; n < n_count; ++n) {
        coupling[h][n] = total == 0.0 ? 1.0 / static_cast<double>(n_count)
                                      : weight[n] / total;
      }
    }
    result.coupling_history.push_back(coupling);
  }
  result.capsules = Mat(n_count, Vec(dims, 0.0));
  for (std::size_t n = 0; n < n_count; ++n) {
    for (std::size_t i = 0; i < dims; ++i) {
      result.capsules[n][i] = activation[n] * mu[n][i];
    }
  }
  result.mu = mu;
  result.sigma2 = sigma2;
  result.activation = activation;
  result.chi = chi;
  result.coupling = coupling;
  return result;
}

}  // namespace oracle
