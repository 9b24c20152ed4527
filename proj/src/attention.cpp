#include "rba/attention.hpp"

#include <cmath>

namespace rba {

Aggregator aggregator_from_string(const std::string& name) {
  if (name == "linear") return Aggregator::kLinear;
  if (name == "simple") return Aggregator::kSimpleRouting;
  if (name == "em") return Aggregator::kEmRouting;
  throw ConfigError("unknown aggregator '" + name +
                    "' (expected linear, simple, or em)");
}

std::string to_string(Aggregator kind) {
  switch (kind) {
    case Aggregator::kLinear: return "linear";
    case Aggregator::kSimpleRouting: return "simple";
    case Aggregator::kEmRouting: return "em";
  }
  throw ConfigError("unknown aggregator value");
}

AttentionParams init_attention_params(int width, int heads, Rng& rng) {
  if (heads < 1 || width < 1 || width % heads != 0) {
    throw ConfigError("attention: head count " + std::to_string(heads) +
                      " must divide width " + std::to_string(width));
  }
  const int dk = width / heads;
  const double proj_std = std::sqrt(2.0 / static_cast<double>(width + dk));
  const double out_std = std::sqrt(1.0 / static_cast<double>(width));
  AttentionParams params;
  for (int h = 0; h < heads; ++h) {
    params.w_q.push_back(randn(Shape{width, dk}, rng, proj_std).set_requires_grad(true));
    params.w_k.push_back(randn(Shape{width, dk}, rng, proj_std).set_requires_grad(true));
    params.w_v.push_back(randn(Shape{width, dk}, rng, proj_std).set_requires_grad(true));
  }
  params.w_o = randn(Shape{width, width}, rng, out_std).set_requires_grad(true);
  return params;
}

HeadProjections project_heads(const Tensor& q, const Tensor& k, const Tensor& v,
                              const AttentionParams& params) {
  if (params.heads() < 1) throw ConfigError("project_heads: no heads configured");
  const int width = params.w_q[0].shape()[0];
  if (q.extent(q.rank() - 1) != width || k.extent(k.rank() - 1) != width ||
      v.extent(v.rank() - 1) != width) {
    throw ShapeError("project_heads: inputs must end in width " +
                     std::to_string(width));
  }
  HeadProjections proj;
  for (int h = 0; h < params.heads(); ++h) {
    proj.q.push_back(matmul(q, params.w_q[static_cast<std::size_t>(h)]));
    proj.k.push_back(matmul(k, params.w_k[static_cast<std::size_t>(h)]));
    proj.v.push_back(matmul(v, params.w_v[static_cast<std::size_t>(h)]));
  }
  return proj;
}

AttentionResult scaled_dot_attention(const Tensor& q_h, const Tensor& k_h,
                                     const Tensor& v_h,
                                     const Tensor& additive_mask) {
  if (q_h.rank() < 2 || k_h.rank() < 2 || v_h.rank() < 2) {
    throw ShapeError("scaled_dot_attention: operands must be [..., rows, dk]");
  }
  const int dk = q_h.extent(q_h.rank() - 1);
  if (dk < 1 || k_h.extent(k_h.rank() - 1) != dk) {
    throw ShapeError("scaled_dot_attention: key width mismatch, " +
                     shape_to_string(q_h.shape()) + " vs " +
                     shape_to_string(k_h.shape()));
  }
  Tensor logits = scale(matmul(q_h, transpose(k_h)),
                        1.0 / std::sqrt(static_cast<double>(dk)));
  if (additive_mask.defined()) logits = add(logits, additive_mask);
  AttentionResult result;
  result.weights = softmax(logits, logits.rank() - 1);
  // Exact accumulation keeps the mix independent of key order, so permuting
  // positions in self-attention permutes the outputs bit-for-bit.
  result.output = matmul(result.weights, v_h, /*exact_accumulate=*/true);
  return result;
}

HeadOutputs concat_heads(const std::vector<Tensor>& per_head) {
  if (per_head.empty()) throw ShapeError("concat_heads: no head outputs");
  HeadOutputs out;
  out.per_head = per_head;
  out.concat = per_head.size() == 1
                   ? per_head[0]
                   : concat(per_head, per_head[0].rank() - 1);
  return out;
}

Tensor aggregate_linear(const HeadOutputs& heads, const Tensor& w_o) {
  return matmul(heads.concat, w_o);
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const AttentionParams& params,
                            const Aggregation& aggregation,
                            const Tensor& additive_mask) {
  HeadProjections proj = project_heads(q, k, v, params);
  std::vector<Tensor> outputs;
  outputs.reserve(proj.q.size());
  for (std::size_t h = 0; h < proj.q.size(); ++h) {
    outputs.push_back(
        scaled_dot_attention(proj.q[h], proj.k[h], proj.v[h], additive_mask).output);
  }
  HeadOutputs heads = concat_heads(outputs);
  switch (aggregation.kind) {
    case Aggregator::kLinear:
      return aggregate_linear(heads, params.w_o);
    case Aggregator::kSimpleRouting:
    case Aggregator::kEmRouting:
      if (aggregation.capsules == nullptr || aggregation.routing == nullptr) {
        throw ConfigError("multi_head_attention: routed aggregation needs "
                          "capsule parameters and a routing config");
      }
      return aggregate_routing(heads.concat, *aggregation.capsules,
                               *aggregation.routing);
  }
  throw ConfigError("multi_head_attention: unknown aggregator");
}

}  // namespace rba
