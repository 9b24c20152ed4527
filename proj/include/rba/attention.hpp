#pragma once

#include <string>
#include <vector>

#include "rba/routing.hpp"
#include "rba/tensor.hpp"

namespace rba {

enum class Aggregator { kLinear, kSimpleRouting, kEmRouting };

Aggregator aggregator_from_string(const std::string& name);
std::string to_string(Aggregator kind);

// Per-head projection matrices plus the baseline output transform.
struct AttentionParams {
  std::vector<Tensor> w_q;  // H of [d, d/H]
  std::vector<Tensor> w_k;
  std::vector<Tensor> w_v;
  Tensor w_o;               // [d, d], used by the linear aggregation only

  int heads() const { return static_cast<int>(w_q.size()); }
};

AttentionParams init_attention_params(int width, int heads, Rng& rng);

struct HeadProjections {
  std::vector<Tensor> q;  // H of [..., J, d/H]
  std::vector<Tensor> k;  // H of [..., M, d/H]
  std::vector<Tensor> v;
};

struct HeadOutputs {
  std::vector<Tensor> per_head;  // H of [..., J, d/H]
  Tensor concat;                 // [..., J, d], head-major column blocks
};

struct AttentionResult {
  Tensor output;   // [..., J, d/H]
  Tensor weights;  // [..., J, M], each row on the simplex
};

// Which aggregation closes the attention block. Routed kinds borrow the
// capsule parameters owned by the caller.
struct Aggregation {
  Aggregator kind = Aggregator::kLinear;
  const CapsuleParams* capsules = nullptr;
  const RoutingConfig* routing = nullptr;
};

HeadProjections project_heads(const Tensor& q, const Tensor& k, const Tensor& v,
                              const AttentionParams& params);

// softmax(Q K^T / sqrt(dk)) V; additive_mask, when defined, is added to the
// logits (shape [..., J, M], 0 for visible keys, large negative for padding).
AttentionResult scaled_dot_attention(const Tensor& q_h, const Tensor& k_h,
                                     const Tensor& v_h,
                                     const Tensor& additive_mask = Tensor());

HeadOutputs concat_heads(const std::vector<Tensor>& per_head);

Tensor aggregate_linear(const HeadOutputs& heads, const Tensor& w_o);

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const AttentionParams& params,
                            const Aggregation& aggregation,
                            const Tensor& additive_mask = Tensor());

}  // namespace rba
