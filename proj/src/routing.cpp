#include "rba/routing.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace rba {

namespace {

constexpr double kLogTwoPi = 1.8378770664093453;  // log(2*pi)

void require_vote_shape(const Tensor& votes) {
  if (!votes.defined() || votes.rank() < 3) {
    throw ShapeError("routing: votes must be [..., H, N, d_out], got " +
                     (votes.defined() ? shape_to_string(votes.shape())
                                      : std::string("undefined")));
  }
}

void require_coupling_shape(const Tensor& coupling, const Tensor& votes) {
  Shape expect(votes.shape().begin(), votes.shape().end() - 1);
  if (coupling.shape() != expect) {
    throw ShapeError("routing: coupling shape " +
                     shape_to_string(coupling.shape()) +
                     " does not match votes " + shape_to_string(votes.shape()));
  }
}

double glorot_stddev(int fan_in, int fan_out) {
  return std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
}

// logistic() lies in the open unit interval mathematically, but extreme
// logits round it to 0.0 or 1.0 at double precision; pin the stored
// activation just inside so A stays a usable probability.
Tensor clamp_unit_open(const Tensor& a) {
  Tensor lo = clamp_min(a, 1e-15);
  return neg(clamp_min(neg(lo), -(1.0 - 1e-15)));
}

}  // namespace

void RoutingConfig::validate() const {
  if (input_capsules < 1 || output_capsules < 1) {
    throw ConfigError("routing: capsule counts must be positive (H=" +
                      std::to_string(input_capsules) + ", N=" +
                      std::to_string(output_capsules) + ")");
  }
  if (model_width < 1) {
    throw ConfigError("routing: model width must be positive");
  }
  if (model_width % input_capsules != 0) {
    throw ConfigError("routing: head count " + std::to_string(input_capsules) +
                      " must divide width " + std::to_string(model_width));
  }
  if (model_width % output_capsules != 0) {
    throw ConfigError("routing: output capsule count " +
                      std::to_string(output_capsules) + " must divide width " +
                      std::to_string(model_width));
  }
  if (iterations < 1) throw ConfigError("routing: iterations must be >= 1");
  if (kind == RoutingKind::kEm &&
      lambda_schedule.size() != static_cast<std::size_t>(iterations)) {
    throw ConfigError("routing: lambda schedule length " +
                      std::to_string(lambda_schedule.size()) +
                      " must equal iteration count " + std::to_string(iterations));
  }
  for (double l : lambda_schedule) {
    if (!(l > 0.0)) throw ConfigError("routing: lambda values must be positive");
  }
  if (!(variance_floor > 0.0)) {
    throw ConfigError("routing: variance floor must be positive");
  }
  if (!(denom_epsilon > 0.0)) {
    throw ConfigError("routing: denominator epsilon must be positive");
  }
  if (!per_position) {
    throw ConfigError("routing: sequence-level routing is not implemented");
  }
}

CapsuleParams init_capsule_params(const RoutingConfig& config, Rng& rng) {
  config.validate();
  const int d = config.model_width;
  const int d_in = config.d_in();
  const int d_out = config.d_out();
  CapsuleParams params;
  for (int h = 0; h < config.input_capsules; ++h) {
    params.f_weight.push_back(
        randn(Shape{d, d_in}, rng, glorot_stddev(d, d_in)).set_requires_grad(true));
    params.f_bias.push_back(zeros(Shape{d_in}).set_requires_grad(true));
  }
  params.vote_weight.resize(config.input_capsules);
  for (int h = 0; h < config.input_capsules; ++h) {
    for (int n = 0; n < config.output_capsules; ++n) {
      params.vote_weight[h].push_back(
          randn(Shape{d_in, d_out}, rng, glorot_stddev(d_in, d_out))
              .set_requires_grad(true));
    }
  }
  if (config.kind == RoutingKind::kEm) {
    params.beta_a =
        full(Shape{config.output_capsules}, config.beta_init).set_requires_grad(true);
    params.beta_mu =
        full(Shape{config.output_capsules}, config.beta_init).set_requires_grad(true);
  }
  return params;
}

std::vector<Tensor> build_input_capsules(const Tensor& o_hat,
                                         const CapsuleParams& params) {
  if (!o_hat.defined() || o_hat.rank() < 2) {
    throw ShapeError("build_input_capsules: input must be [..., d]");
  }
  Shape leading(o_hat.shape().begin(), o_hat.shape().end() - 1);
  std::vector<Tensor> capsules;
  capsules.reserve(params.f_weight.size());
  for (std::size_t h = 0; h < params.f_weight.size(); ++h) {
    Tensor pre = matmul(o_hat, params.f_weight[h]);
    Tensor bias = expand_leading(params.f_bias[h], leading);
    capsules.push_back(tanh(add(pre, bias)));
  }
  return capsules;
}

Tensor compute_votes(const std::vector<Tensor>& capsules,
                     const CapsuleParams& params) {
  if (capsules.empty() || capsules.size() != params.vote_weight.size()) {
    throw ShapeError("compute_votes: capsule count does not match vote matrices");
  }
  const int h_count = static_cast<int>(capsules.size());
  const int n_count = static_cast<int>(params.vote_weight[0].size());
  const int d_out = params.vote_weight[0][0].shape()[1];
  std::vector<Tensor> blocks;
  blocks.reserve(static_cast<std::size_t>(h_count) * n_count);
  for (int h = 0; h < h_count; ++h) {
    for (int n = 0; n < n_count; ++n) {
      blocks.push_back(matmul(capsules[h], params.vote_weight[h][n]));
    }
  }
  Tensor flat = concat(blocks, blocks[0].rank() - 1);  // [..., H*N*d_out]
  Shape shape(flat.shape().begin(), flat.shape().end() - 1);
  shape.push_back(h_count);
  shape.push_back(n_count);
  shape.push_back(d_out);
  return reshape(flat, shape);
}

Tensor output_capsules(const Tensor& coupling, const Tensor& votes,
                       double denom_epsilon) {
  require_vote_shape(votes);
  require_coupling_shape(coupling, votes);
  const int d_out = votes.extent(votes.rank() - 1);
  Tensor cb = expand_axis(coupling, coupling.rank(), d_out);
  Tensor numer = reduce_sum(mul(cb, votes), votes.rank() - 3);   // drop H
  Tensor denom = reduce_sum(coupling, coupling.rank() - 2);      // drop H
  Tensor guarded = clamp_min(denom, denom_epsilon);
  return div(numer, expand_axis(guarded, guarded.rank(), d_out));
}

Tensor squash(const Tensor& s) {
  if (!s.defined() || s.rank() < 1) {
    throw ShapeError("squash: input must have at least one axis");
  }
  const int d_out = s.extent(s.rank() - 1);
  Tensor norm2 = reduce_sum(square(s), s.rank() - 1);
  // |s| * |s| / (1 + |s|^2) along the direction s/|s| collapses to
  // s * |s| / (1 + |s|^2); the tiny epsilon keeps sqrt differentiable at 0.
  Tensor factor = div(sqrt(add_scalar(norm2, 1e-30)), add_scalar(norm2, 1.0));
  return mul(s, expand_axis(factor, factor.rank(), d_out));
}

SimpleRoutingResult simple_routing(const Tensor& votes, int iterations,
                                   double denom_epsilon) {
  require_vote_shape(votes);
  if (iterations < 1) throw ConfigError("simple_routing: iterations must be >= 1");
  const int h_count = votes.extent(votes.rank() - 3);
  Shape logit_shape(votes.shape().begin(), votes.shape().end() - 1);

  SimpleRoutingResult result;
  Tensor logits = zeros(logit_shape);
  Tensor coupling;
  Tensor capsules;
  for (int t = 0; t < iterations; ++t) {
    coupling = softmax(logits, logits.rank() - 1);
    capsules = squash(output_capsules(coupling, votes, denom_epsilon));
    Tensor agreement = reduce_sum(
        mul(expand_axis(capsules, capsules.rank() - 2, h_count), votes),
        votes.rank() - 1);
    logits = add(logits, agreement);
    result.coupling_history.push_back(coupling);
  }
  result.capsules = capsules;
  result.logits = logits;
  result.coupling = coupling;
  return result;
}

EmStats em_m_step(const Tensor& votes, const Tensor& coupling,
                  const Tensor& beta_a, const Tensor& beta_mu, double lambda,
                  const RoutingConfig& config) {
  require_vote_shape(votes);
  require_coupling_shape(coupling, votes);
  const int h_count = votes.extent(votes.rank() - 3);
  const int n_count = votes.extent(votes.rank() - 2);
  const int d_out = votes.extent(votes.rank() - 1);
  if (!beta_a.defined() || beta_a.shape() != Shape{n_count} ||
      !beta_mu.defined() || beta_mu.shape() != Shape{n_count}) {
    throw ShapeError("em_m_step: beta parameters must have shape [N]");
  }

  EmStats stats;
  Tensor denom = reduce_sum(coupling, coupling.rank() - 2);  // [..., N]
  stats.mu = output_capsules(coupling, votes, config.denom_epsilon);

  Tensor mu_b = expand_axis(stats.mu, stats.mu.rank() - 2, h_count);
  Tensor spread = mul(expand_axis(coupling, coupling.rank(), d_out),
                      square(sub(votes, mu_b)));
  Tensor spread_sum = reduce_sum(spread, votes.rank() - 3);
  Tensor guarded = clamp_min(denom, config.denom_epsilon);
  stats.sigma2 = clamp_min(
      div(spread_sum, expand_axis(guarded, guarded.rank(), d_out)),
      config.variance_floor);

  // chi_n = (sum_i log sigma_i + d_out * (1 + log 2pi) / 2) * sum_h C
  Tensor half_log_var = scale(log(stats.sigma2), 0.5);
  Tensor cost_base = add_scalar(reduce_sum(half_log_var, half_log_var.rank() - 1),
                                d_out * (1.0 + kLogTwoPi) / 2.0);
  stats.chi = mul(cost_base, denom);

  Shape leading(denom.shape().begin(), denom.shape().end() - 1);
  Tensor beta_a_b = expand_leading(beta_a, leading);
  Tensor beta_mu_b = expand_leading(beta_mu, leading);
  stats.activation_logit =
      scale(sub(sub(beta_a_b, mul(beta_mu_b, denom)), stats.chi), lambda);
  stats.activation = clamp_unit_open(logistic(stats.activation_logit));
  return stats;
}

Tensor em_e_step(const Tensor& votes, const EmStats& stats,
                 const RoutingConfig& config) {
  require_vote_shape(votes);
  const int h_count = votes.extent(votes.rank() - 3);
  const int n_count = votes.extent(votes.rank() - 2);

  Tensor mu_b = expand_axis(stats.mu, stats.mu.rank() - 2, h_count);
  Tensor sigma2_b = expand_axis(stats.sigma2, stats.sigma2.rank() - 2, h_count);
  Tensor quad = div(square(sub(votes, mu_b)), scale(sigma2_b, 2.0));

  if (config.density == EStepDensity::kProductLogDomain) {
    // log prod_i N(v_i; mu_i, sigma_i^2), then renormalize through softmax:
    // C = A_n P_n / sum A P == softmax_n(log A + log P).
    Tensor log_det = scale(add_scalar(log(stats.sigma2), kLogTwoPi), 0.5);
    Tensor log_det_sum = reduce_sum(log_det, log_det.rank() - 1);  // [..., N]
    Tensor log_density = neg(add(
        expand_axis(log_det_sum, log_det_sum.rank() - 1, h_count),
        reduce_sum(quad, quad.rank() - 1)));
    Tensor log_activation = neg(softplus(neg(stats.activation_logit)));
    Tensor weight = add(
        expand_axis(log_activation, log_activation.rank() - 1, h_count),
        log_density);
    return softmax(weight, weight.rank() - 1);
  }

  // Literal form: density summed over dimensions, renormalized directly,
  // with a uniform fallback where every A_n P_n underflows to zero.
  Tensor per_dim = div(exp(neg(quad)),
                       sqrt(scale(sigma2_b, 2.0 * std::numbers::pi)));
  Tensor density = reduce_sum(per_dim, per_dim.rank() - 1);  // [..., H, N]
  Tensor activation_b = expand_axis(stats.activation,
                                    stats.activation.rank() - 1, h_count);
  Tensor weight = mul(activation_b, density);
  Tensor total = reduce_sum(weight, weight.rank() - 1);  // [..., H]

  Tensor keep(total.shape());      // 1 where the row normalizes, else 0
  Tensor pad(total.shape());       // additive 1 so the division stays legal
  for (std::size_t i = 0; i < total.numel(); ++i) {
    const bool ok = total.values()[i] > 0.0;
    keep.values()[i] = ok ? 1.0 : 0.0;
    pad.values()[i] = ok ? 0.0 : 1.0;
  }
  Tensor safe_total = add(total, pad);
  Tensor ratio = div(weight, expand_axis(safe_total, safe_total.rank(), n_count));
  Tensor keep_b = expand_axis(keep, keep.rank(), n_count);
  Tensor fallback(ratio.shape());
  const double uniform = 1.0 / static_cast<double>(n_count);
  for (std::size_t i = 0; i < fallback.numel(); ++i) {
    fallback.values()[i] = (1.0 - keep_b.values()[i]) * uniform;
  }
  return add(mul(ratio, keep_b), fallback);
}

EmRoutingResult em_routing(const Tensor& votes, const RoutingConfig& config,
                           const Tensor& beta_a, const Tensor& beta_mu) {
  require_vote_shape(votes);
  if (config.iterations < 1) throw ConfigError("em_routing: iterations must be >= 1");
  if (config.lambda_schedule.size() != static_cast<std::size_t>(config.iterations)) {
    throw ConfigError("em_routing: lambda schedule length " +
                      std::to_string(config.lambda_schedule.size()) +
                      " must equal iteration count " +
                      std::to_string(config.iterations));
  }
  const int n_count = votes.extent(votes.rank() - 2);
  const int d_out = votes.extent(votes.rank() - 1);
  Shape coupling_shape(votes.shape().begin(), votes.shape().end() - 1);

  EmRoutingResult result;
  Tensor coupling = full(coupling_shape, 1.0 / static_cast<double>(n_count));
  EmStats stats;
  for (int t = 0; t < config.iterations; ++t) {
    stats = em_m_step(votes, coupling, beta_a, beta_mu,
                      config.lambda_schedule[static_cast<std::size_t>(t)], config);
    coupling = em_e_step(votes, stats, config);
    result.coupling_history.push_back(coupling);
  }
  result.capsules = mul(
      expand_axis(stats.activation, stats.activation.rank(), d_out), stats.mu);
  result.stats = stats;
  result.coupling = coupling;
  return result;
}

Tensor aggregate_routing(const Tensor& o_hat, const CapsuleParams& params,
                         const RoutingConfig& config) {
  config.validate();
  if (!o_hat.defined() || o_hat.rank() < 2 ||
      o_hat.extent(o_hat.rank() - 1) != config.model_width) {
    throw ShapeError("aggregate_routing: input must be [..., d] with d = " +
                     std::to_string(config.model_width));
  }
  std::vector<Tensor> capsules = build_input_capsules(o_hat, params);
  Tensor votes = compute_votes(capsules, params);
  Tensor routed;
  if (config.kind == RoutingKind::kSimple) {
    routed = simple_routing(votes, config.iterations, config.denom_epsilon).capsules;
  } else {
    routed = em_routing(votes, config, params.beta_a, params.beta_mu).capsules;
  }
  Shape out_shape(routed.shape().begin(), routed.shape().end() - 2);
  out_shape.push_back(config.model_width);
  return reshape(routed, out_shape);
}

}  // namespace rba
