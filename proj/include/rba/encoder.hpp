#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rba/attention.hpp"
#include "rba/checkpoint.hpp"
#include "rba/routing.hpp"
#include "rba/tensor.hpp"

namespace rba {

using TokenBatch = std::vector<std::vector<int>>;  // padded to a common length

struct EncoderConfig {
  int layers = 2;
  int width = 32;
  int heads = 4;
  int ffn_width = 64;
  int vocab_size = 65;     // includes the padding row appended after the task vocab
  int max_positions = 32;
  int classes = 2;
  bool positional = true;  // learned position embeddings added at the input
  double ln_eps = 1e-5;
  std::vector<Aggregator> per_layer_aggregator;  // one entry per layer
  RoutingConfig routing;  // N, T, lambda schedule etc. shared by routed layers

  void validate() const;
  // Routing config with H and d filled in from the model dimensions.
  RoutingConfig resolved_routing(Aggregator kind) const;
};

struct EncoderLayerParams {
  Tensor ln1_gain, ln1_bias;
  AttentionParams attn;                // w_o defined only for linear layers
  std::optional<CapsuleParams> caps;   // present for routed layers
  Tensor ln2_gain, ln2_bias;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

// Pre-norm encoder stack with a per-layer choice of head aggregation and a
// mean-pooled tanh-MLP classifier head.
class EncoderModel {
 public:
  EncoderModel(EncoderConfig config, std::uint64_t seed);
  EncoderModel(EncoderConfig config, Rng& rng);

  // tokens: padded id batch; mask: [B, J] with 1 for real tokens, 0 for pad.
  Tensor encode(const TokenBatch& tokens, const Tensor& mask) const;
  Tensor classify(const Tensor& states, const Tensor& mask) const;
  Tensor forward(const TokenBatch& tokens, const Tensor& mask) const;

  NamedTensors named_parameters();
  std::size_t parameter_count() const;
  const EncoderConfig& config() const { return config_; }
  EncoderLayerParams& layer(int index) { return layers_.at(static_cast<std::size_t>(index)); }

  // Closed-form parameter count of one aggregation site.
  static std::size_t aggregator_parameter_count(Aggregator kind, int width,
                                                int heads, int output_capsules);

 private:
  void init_parameters(Rng& rng);

  EncoderConfig config_;
  Tensor token_embedding_;
  Tensor position_embedding_;
  std::vector<EncoderLayerParams> layers_;
  Tensor head_w1_, head_b1_, head_w2_, head_b2_;
};

}  // namespace rba
