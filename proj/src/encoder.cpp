#include "rba/encoder.hpp"

#include <cmath>

namespace rba {

namespace {

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  const int d = x.extent(x.rank() - 1);
  Tensor mean = reduce_mean(x, x.rank() - 1);
  Tensor centered = sub(x, expand_axis(mean, mean.rank(), d));
  Tensor var = reduce_mean(square(centered), centered.rank() - 1);
  Tensor normed = div(centered, expand_axis(sqrt(add_scalar(var, eps)),
                                            var.rank(), d));
  Shape leading(x.shape().begin(), x.shape().end() - 1);
  return add(mul(normed, expand_leading(gain, leading)),
             expand_leading(bias, leading));
}

double glorot_stddev(int fan_in, int fan_out) {
  return std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
}

}  // namespace

void EncoderConfig::validate() const {
  if (layers < 1) throw ConfigError("encoder: layer count must be >= 1");
  if (width < 1 || heads < 1 || width % heads != 0) {
    throw ConfigError("encoder: head count " + std::to_string(heads) +
                      " must divide width " + std::to_string(width));
  }
  if (ffn_width < 1) throw ConfigError("encoder: ffn width must be positive");
  if (vocab_size < 2) throw ConfigError("encoder: vocabulary too small");
  if (max_positions < 1) throw ConfigError("encoder: max positions must be >= 1");
  if (classes < 2) throw ConfigError("encoder: need at least two classes");
  if (per_layer_aggregator.size() != static_cast<std::size_t>(layers)) {
    throw ConfigError("encoder: per-layer aggregator list has " +
                      std::to_string(per_layer_aggregator.size()) +
                      " entries for " + std::to_string(layers) + " layers");
  }
  for (Aggregator a : per_layer_aggregator) {
    if (a != Aggregator::kLinear) {
      resolved_routing(a).validate();
      break;
    }
  }
}

RoutingConfig EncoderConfig::resolved_routing(Aggregator kind) const {
  RoutingConfig cfg = routing;
  cfg.kind = kind == Aggregator::kEmRouting ? RoutingKind::kEm
                                            : RoutingKind::kSimple;
  cfg.input_capsules = heads;
  cfg.model_width = width;
  return cfg;
}

EncoderModel::EncoderModel(EncoderConfig config, std::uint64_t seed)
    : config_(std::move(config)) {
  Rng rng(seed);
  config_.validate();
  init_parameters(rng);
}

EncoderModel::EncoderModel(EncoderConfig config, Rng& rng)
    : config_(std::move(config)) {
  config_.validate();
  init_parameters(rng);
}

// Parameters are drawn in the exact order named_parameters() lists them,
// from a single generator, so (config, seed) pins every initial value.
void EncoderModel::init_parameters(Rng& rng) {
  const int d = config_.width;
  token_embedding_ =
      randn(Shape{config_.vocab_size, d}, rng, 0.1).set_requires_grad(true);
  if (config_.positional) {
    position_embedding_ =
        randn(Shape{config_.max_positions, d}, rng, 0.1).set_requires_grad(true);
  }
  for (int l = 0; l < config_.layers; ++l) {
    EncoderLayerParams layer;
    layer.ln1_gain = ones(Shape{d}).set_requires_grad(true);
    layer.ln1_bias = zeros(Shape{d}).set_requires_grad(true);
    const Aggregator kind = config_.per_layer_aggregator[static_cast<std::size_t>(l)];
    const int dk = d / config_.heads;
    const double proj_std = glorot_stddev(d, dk);
    for (int h = 0; h < config_.heads; ++h) {
      layer.attn.w_q.push_back(randn(Shape{d, dk}, rng, proj_std).set_requires_grad(true));
      layer.attn.w_k.push_back(randn(Shape{d, dk}, rng, proj_std).set_requires_grad(true));
      layer.attn.w_v.push_back(randn(Shape{d, dk}, rng, proj_std).set_requires_grad(true));
    }
    if (kind == Aggregator::kLinear) {
      layer.attn.w_o =
          randn(Shape{d, d}, rng, glorot_stddev(d, d)).set_requires_grad(true);
    } else {
      layer.caps = init_capsule_params(config_.resolved_routing(kind), rng);
    }
    layer.ln2_gain = ones(Shape{d}).set_requires_grad(true);
    layer.ln2_bias = zeros(Shape{d}).set_requires_grad(true);
    layer.ffn_w1 = randn(Shape{d, config_.ffn_width}, rng,
                         glorot_stddev(d, config_.ffn_width))
                       .set_requires_grad(true);
    layer.ffn_b1 = zeros(Shape{config_.ffn_width}).set_requires_grad(true);
    layer.ffn_w2 = randn(Shape{config_.ffn_width, d}, rng,
                         glorot_stddev(config_.ffn_width, d))
                       .set_requires_grad(true);
    layer.ffn_b2 = zeros(Shape{d}).set_requires_grad(true);
    layers_.push_back(std::move(layer));
  }
  head_w1_ = randn(Shape{d, d}, rng, glorot_stddev(d, d)).set_requires_grad(true);
  head_b1_ = zeros(Shape{d}).set_requires_grad(true);
  head_w2_ = randn(Shape{d, config_.classes}, rng,
                   glorot_stddev(d, config_.classes))
                 .set_requires_grad(true);
  head_b2_ = zeros(Shape{config_.classes}).set_requires_grad(true);
}

Tensor EncoderModel::encode(const TokenBatch& tokens, const Tensor& mask) const {
  if (tokens.empty() || tokens[0].empty()) {
    throw DataError("encode: empty token batch");
  }
  const int batch = static_cast<int>(tokens.size());
  const int length = static_cast<int>(tokens[0].size());
  if (length > config_.max_positions) {
    throw DataError("encode: sequence length " + std::to_string(length) +
                    " exceeds max positions " +
                    std::to_string(config_.max_positions));
  }
  if (mask.shape() != Shape{batch, length}) {
    throw ShapeError("encode: mask must be [batch, length], got " +
                     shape_to_string(mask.shape()));
  }

  Tensor states = embedding(token_embedding_, tokens);  // [B, J, d]
  if (config_.positional) {
    Tensor rows = slice(position_embedding_, 0, 0, length);
    states = add(states, expand_axis(rows, 0, batch));
  }

  // additive key mask: 0 on real tokens, -1e9 on padding
  Tensor additive = expand_axis(scale(add_scalar(mask, -1.0), 1e9), 1, length);

  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const EncoderLayerParams& layer = layers_[l];
    const Aggregator kind = config_.per_layer_aggregator[l];
    Aggregation agg;
    agg.kind = kind;
    RoutingConfig routing_cfg;
    if (kind != Aggregator::kLinear) {
      routing_cfg = config_.resolved_routing(kind);
      agg.capsules = &*layer.caps;
      agg.routing = &routing_cfg;
    }
    Tensor normed = layer_norm(states, layer.ln1_gain, layer.ln1_bias,
                               config_.ln_eps);
    Tensor attended =
        multi_head_attention(normed, normed, normed, layer.attn, agg, additive);
    states = add(states, attended);

    Tensor normed2 = layer_norm(states, layer.ln2_gain, layer.ln2_bias,
                                config_.ln_eps);
    Shape leading{batch, length};
    Tensor hidden = relu(add(matmul(normed2, layer.ffn_w1),
                             expand_leading(layer.ffn_b1, leading)));
    Tensor ffn_out = add(matmul(hidden, layer.ffn_w2),
                         expand_leading(layer.ffn_b2, leading));
    states = add(states, ffn_out);
  }
  return states;
}

Tensor EncoderModel::classify(const Tensor& states, const Tensor& mask) const {
  if (states.rank() != 3) {
    throw ShapeError("classify: states must be [batch, length, width]");
  }
  const int batch = states.extent(0);
  const int length = states.extent(1);
  const int d = states.extent(2);
  if (mask.shape() != Shape{batch, length}) {
    throw ShapeError("classify: mask must be [batch, length]");
  }
  Tensor masked = mul(states, expand_axis(mask, 2, d));
  Tensor summed = reduce_sum(masked, 1);              // [B, d]
  Tensor counts = reduce_sum(mask, 1);                // [B]
  Tensor pooled = div(summed, expand_axis(counts, 1, d));
  Tensor hidden = tanh(add(matmul(pooled, head_w1_),
                           expand_leading(head_b1_, Shape{batch})));
  return add(matmul(hidden, head_w2_), expand_leading(head_b2_, Shape{batch}));
}

Tensor EncoderModel::forward(const TokenBatch& tokens, const Tensor& mask) const {
  return classify(encode(tokens, mask), mask);
}

NamedTensors EncoderModel::named_parameters() {
  NamedTensors params;
  params.emplace_back("embed.token", token_embedding_);
  if (config_.positional) params.emplace_back("embed.pos", position_embedding_);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    EncoderLayerParams& layer = layers_[l];
    params.emplace_back(prefix + "ln1.gain", layer.ln1_gain);
    params.emplace_back(prefix + "ln1.bias", layer.ln1_bias);
    for (std::size_t h = 0; h < layer.attn.w_q.size(); ++h) {
      params.emplace_back(prefix + "attn.q" + std::to_string(h), layer.attn.w_q[h]);
      params.emplace_back(prefix + "attn.k" + std::to_string(h), layer.attn.w_k[h]);
      params.emplace_back(prefix + "attn.v" + std::to_string(h), layer.attn.w_v[h]);
    }
    if (layer.attn.w_o.defined()) {
      params.emplace_back(prefix + "attn.o", layer.attn.w_o);
    }
    if (layer.caps.has_value()) {
      CapsuleParams& caps = *layer.caps;
      for (std::size_t h = 0; h < caps.f_weight.size(); ++h) {
        params.emplace_back(prefix + "caps.f" + std::to_string(h) + ".weight",
                            caps.f_weight[h]);
        params.emplace_back(prefix + "caps.f" + std::to_string(h) + ".bias",
                            caps.f_bias[h]);
      }
      for (std::size_t h = 0; h < caps.vote_weight.size(); ++h) {
        for (std::size_t n = 0; n < caps.vote_weight[h].size(); ++n) {
          params.emplace_back(prefix + "caps.vote" + std::to_string(h) + "_" +
                                  std::to_string(n),
                              caps.vote_weight[h][n]);
        }
      }
      if (caps.beta_a.defined()) {
        params.emplace_back(prefix + "caps.beta_a", caps.beta_a);
        params.emplace_back(prefix + "caps.beta_mu", caps.beta_mu);
      }
    }
    params.emplace_back(prefix + "ln2.gain", layer.ln2_gain);
    params.emplace_back(prefix + "ln2.bias", layer.ln2_bias);
    params.emplace_back(prefix + "ffn.w1", layer.ffn_w1);
    params.emplace_back(prefix + "ffn.b1", layer.ffn_b1);
    params.emplace_back(prefix + "ffn.w2", layer.ffn_w2);
    params.emplace_back(prefix + "ffn.b2", layer.ffn_b2);
  }
  params.emplace_back("head.w1", head_w1_);
  params.emplace_back("head.b1", head_b1_);
  params.emplace_back("head.w2", head_w2_);
  params.emplace_back("head.b2", head_b2_);
  return params;
}

std::size_t EncoderModel::parameter_count() const {
  std::size_t count = 0;
  auto* self = const_cast<EncoderModel*>(this);
  for (const auto& [name, tensor] : self->named_parameters()) {
    count += tensor.numel();
  }
  return count;
}

std::size_t EncoderModel::aggregator_parameter_count(Aggregator kind, int width,
                                                     int heads,
                                                     int output_capsules) {
  (void)heads;  // cancels: H * (d * d/H) and H * N * (d/H) * (d/N)
  const std::size_t d = static_cast<std::size_t>(width);
  switch (kind) {
    case Aggregator::kLinear:
      return d * d;  // W_O
    case Aggregator::kSimpleRouting:
      // f_h maps: H * (d * d/H + d/H) = d^2 + d; votes: H*N*(d/H)*(d/N) = d^2
      return 2 * d * d + d;
    case Aggregator::kEmRouting:
      return 2 * d * d + d + 2 * static_cast<std::size_t>(output_capsules);
  }
  throw ConfigError("unknown aggregator value");
}

}  // namespace rba
