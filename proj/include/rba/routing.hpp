#pragma once

#include <vector>

#include "rba/tensor.hpp"

namespace rba {

// Routing-by-agreement over vote tensors shaped [..., H, N, d_out]:
// H input capsules propose votes for N output capsules; the leading extents
// (batch, sequence position) are carried through untouched, which is what
// makes routing strictly per-position.

enum class RoutingKind { kSimple, kEm };

// Placement of the per-dimension Gaussian terms in the E-step density:
// combined as a product in the log domain, or summed literally.
enum class EStepDensity { kProductLogDomain, kSumLiteral };

struct RoutingConfig {
  RoutingKind kind = RoutingKind::kSimple;
  int input_capsules = 0;   // H, equals the attention head count
  int output_capsules = 0;  // N
  int iterations = 3;       // T
  int model_width = 0;      // d
  double variance_floor = 1e-6;
  double denom_epsilon = 1e-12;
  std::vector<double> lambda_schedule = {1.0, 2.0, 3.0};  // one entry per iteration
  EStepDensity density = EStepDensity::kProductLogDomain;
  double beta_init = 0.0;
  bool per_position = true;  // only per-position routing is implemented

  int d_in() const { return model_width / input_capsules; }
  int d_out() const { return model_width / output_capsules; }
  void validate() const;
};

// Learned state for one routed aggregation site: the per-head capsule
// transforms f_h (affine + tanh), the H*N vote matrices, and the EM cost
// offsets (empty tensors when kind == kSimple).
struct CapsuleParams {
  std::vector<Tensor> f_weight;               // H of [d, d_in]
  std::vector<Tensor> f_bias;                 // H of [d_in]
  std::vector<std::vector<Tensor>> vote_weight;  // [H][N] of [d_in, d_out]
  Tensor beta_a;                              // [N], EM only
  Tensor beta_mu;                             // [N], EM only
};

CapsuleParams init_capsule_params(const RoutingConfig& config, Rng& rng);

struct SimpleRoutingResult {
  Tensor capsules;  // [..., N, d_out], squashed
  Tensor logits;    // final B, [..., H, N]
  Tensor coupling;  // final C, [..., H, N]
  std::vector<Tensor> coupling_history;  // C after each iteration
};

struct EmStats {
  Tensor mu;               // [..., N, d_out]
  Tensor sigma2;           // [..., N, d_out], floored
  Tensor chi;              // [..., N]
  Tensor activation;       // [..., N], in (0, 1)
  Tensor activation_logit; // [..., N], pre-logistic argument
};

struct EmRoutingResult {
  Tensor capsules;  // [..., N, d_out] = A_n * mu_n
  EmStats stats;
  Tensor coupling;  // final C, [..., H, N]
  std::vector<Tensor> coupling_history;  // C after each E-step
};

// f_h applied to the concatenated head outputs, one tensor per input capsule.
std::vector<Tensor> build_input_capsules(const Tensor& o_hat,
                                         const CapsuleParams& params);

// Vote tensor [..., H, N, d_out] from the H input capsules.
Tensor compute_votes(const std::vector<Tensor>& capsules,
                     const CapsuleParams& params);

// Weighted vote mean per output capsule: sum_h C V / max(sum_h C, eps).
// The max-guard (rather than adding eps) keeps the ratio exactly invariant
// under power-of-two rescaling of C.
Tensor output_capsules(const Tensor& coupling, const Tensor& votes,
                       double denom_epsilon = 1e-12);

// Norm-shrinking nonlinearity along the last axis; zero maps to zero.
Tensor squash(const Tensor& s);

SimpleRoutingResult simple_routing(const Tensor& votes, int iterations,
                                   double denom_epsilon = 1e-12);

EmStats em_m_step(const Tensor& votes, const Tensor& coupling,
                  const Tensor& beta_a, const Tensor& beta_mu, double lambda,
                  const RoutingConfig& config);

Tensor em_e_step(const Tensor& votes, const EmStats& stats,
                 const RoutingConfig& config);

EmRoutingResult em_routing(const Tensor& votes, const RoutingConfig& config,
                           const Tensor& beta_a, const Tensor& beta_mu);

// Full aggregation: build capsules, vote, route, concatenate the N output
// capsules back to width d. Input and output are [..., d].
Tensor aggregate_routing(const Tensor& o_hat, const CapsuleParams& params,
                         const RoutingConfig& config);

}  // namespace rba
