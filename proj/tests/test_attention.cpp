#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "rba/attention.hpp"
#include "test_util.hpp"

using namespace rba;
using testutil::max_abs_diff;

namespace {

oracle::Mat to_mat(const Tensor& t) {
  oracle::Mat m(static_cast<std::size_t>(t.extent(0)),
                oracle::Vec(static_cast<std::size_t>(t.extent(1))));
  for (int i = 0; i < t.extent(0); ++i) {
    for (int j = 0; j < t.extent(1); ++j) {
      m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = t.at({i, j});
    }
  }
  return m;
}

RoutingConfig routed_config(RoutingKind kind, int heads, int capsules, int width,
                            int iterations) {
  RoutingConfig cfg;
  cfg.kind = kind;
  cfg.input_capsules = heads;
  cfg.output_capsules = capsules;
  cfg.iterations = iterations;
  cfg.model_width = width;
  cfg.lambda_schedule.resize(static_cast<std::size_t>(iterations));
  for (int t = 0; t < iterations; ++t) {
    cfg.lambda_schedule[static_cast<std::size_t>(t)] = 1.0 + t;
  }
  return cfg;
}

}  // namespace

TEST_CASE("aggregator names round-trip") {
  CHECK(aggregator_from_string("linear") == Aggregator::kLinear);
  CHECK(aggregator_from_string("simple") == Aggregator::kSimpleRouting);
  CHECK(aggregator_from_string("em") == Aggregator::kEmRouting);
  CHECK(to_string(Aggregator::kEmRouting) == "em");
  CHECK_THROWS_AS(aggregator_from_string("mean"), ConfigError);
}

TEST_CASE("head projections with sliced identity recover column slices") {
  const int d = 4, heads = 2, dk = 2;
  AttentionParams params;
  for (int h = 0; h < heads; ++h) {
    Tensor w(Shape{d, dk});
    for (int i = 0; i < dk; ++i) w.values()[(h * dk + i) * dk + i] = 1.0;
    params.w_q.push_back(w);
    params.w_k.push_back(w);
    params.w_v.push_back(w);
  }
  params.w_o = zeros(Shape{d, d});
  Rng rng(11);
  Tensor x = randn(Shape{3, d}, rng);
  HeadProjections proj = project_heads(x, x, x, params);
  for (int h = 0; h < heads; ++h) {
    for (int j = 0; j < 3; ++j) {
      for (int i = 0; i < dk; ++i) {
        CHECK(proj.q[static_cast<std::size_t>(h)].at({j, i}) ==
              x.at({j, h * dk + i}));
      }
    }
  }
}

TEST_CASE("head projections: zero input gives zero projections") {
  Rng rng(12);
  AttentionParams params = init_attention_params(4, 2, rng);
  Tensor zero(Shape{3, 4});
  HeadProjections proj = project_heads(zero, zero, zero, params);
  for (const Tensor& t : proj.q) {
    for (double v : t.values()) CHECK(v == 0.0);
  }
}

TEST_CASE("head projections match the triple-loop oracle") {
  Rng rng(11);
  AttentionParams params = init_attention_params(4, 2, rng);
  Tensor q = randn(Shape{2, 4}, rng);
  Tensor k = randn(Shape{3, 4}, rng);
  Tensor v = randn(Shape{3, 4}, rng);
  HeadProjections proj = project_heads(q, k, v, params);
  for (int h = 0; h < 2; ++h) {
    const oracle::Mat expect_q =
        oracle::matmul(to_mat(q), to_mat(params.w_q[static_cast<std::size_t>(h)]));
    const oracle::Mat expect_k =
        oracle::matmul(to_mat(k), to_mat(params.w_k[static_cast<std::size_t>(h)]));
    for (int j = 0; j < 2; ++j) {
      for (int i = 0; i < 2; ++i) {
        CHECK(proj.q[static_cast<std::size_t>(h)].at({j, i}) ==
              doctest::Approx(expect_q[static_cast<std::size_t>(j)]
                                      [static_cast<std::size_t>(i)])
                  .epsilon(1e-14));
      }
    }
    for (int j = 0; j < 3; ++j) {
      for (int i = 0; i < 2; ++i) {
        CHECK(proj.k[static_cast<std::size_t>(h)].at({j, i}) ==
              doctest::Approx(expect_k[static_cast<std::size_t>(j)]
                                      [static_cast<std::size_t>(i)])
                  .epsilon(1e-14));
      }
    }
  }
}

TEST_CASE("projection rejects widths the head count cannot divide") {
  Rng rng(13);
  CHECK_THROWS_AS(init_attention_params(6, 4, rng), ConfigError);
}

TEST_CASE("single key attends with weight exactly one") {
  Rng rng(17);
  Tensor q = randn(Shape{3, 2}, rng);
  Tensor k = randn(Shape{1, 2}, rng);
  Tensor v = randn(Shape{1, 2}, rng);
  AttentionResult r = scaled_dot_attention(q, k, v);
  for (int j = 0; j < 3; ++j) {
    CHECK(r.weights.at({j, 0}) == 1.0);
    for (int i = 0; i < 2; ++i) CHECK(r.output.at({j, i}) == v.at({0, i}));
  }
}

TEST_CASE("equal logits average the value rows") {
  // queries orthogonal to every key: all logits are zero
  Tensor q(Shape{2, 2}, {1.0, 0.0, 2.0, 0.0});
  Tensor k(Shape{3, 2}, {0.0, 1.0, 0.0, -2.0, 0.0, 0.5});
  Rng rng(19);
  Tensor v = randn(Shape{3, 2}, rng);
  AttentionResult r = scaled_dot_attention(q, k, v);
  for (int j = 0; j < 2; ++j) {
    for (int i = 0; i < 2; ++i) {
      const double mean = (v.at({0, i}) + v.at({1, i}) + v.at({2, i})) / 3.0;
      CHECK(r.output.at({j, i}) == doctest::Approx(mean).epsilon(1e-14));
    }
  }
}

TEST_CASE("scaled dot attention matches the direct-evaluation oracle") {
  Rng rng(3);
  Tensor q = randn(Shape{2, 2}, rng);
  Tensor k = randn(Shape{3, 2}, rng);
  Tensor v = randn(Shape{3, 2}, rng);
  AttentionResult r = scaled_dot_attention(q, k, v);
  const oracle::Mat expect =
      oracle::scaled_dot_attention(to_mat(q), to_mat(k), to_mat(v));
  for (int j = 0; j < 2; ++j) {
    for (int i = 0; i < 2; ++i) {
      CHECK(std::fabs(r.output.at({j, i}) -
                      expect[static_cast<std::size_t>(j)]
                            [static_cast<std::size_t>(i)]) < 1e-14);
    }
  }
}

TEST_CASE("attention weights are row-stochastic for every head") {
  Rng rng(23);
  AttentionParams params = init_attention_params(8, 4, rng);
  Tensor x = randn(Shape{5, 8}, rng);
  HeadProjections proj = project_heads(x, x, x, params);
  for (std::size_t h = 0; h < 4; ++h) {
    AttentionResult r = scaled_dot_attention(proj.q[h], proj.k[h], proj.v[h]);
    for (int j = 0; j < 5; ++j) {
      double sum = 0.0;
      for (int m = 0; m < 5; ++m) {
        const double w = r.weights.at({j, m});
        CHECK(w >= 0.0);
        CHECK(w <= 1.0);
        sum += w;
      }
      CHECK(std::fabs(sum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("linear aggregation identity, zero, and oracle cases") {
  Rng rng(29);
  Tensor o1 = randn(Shape{3, 2}, rng);
  Tensor o2 = randn(Shape{3, 2}, rng);
  HeadOutputs heads = concat_heads({o1, o2});
  CHECK(heads.concat.shape() == Shape{3, 4});

  // concatenation order: slicing the blocks recovers each head exactly
  Tensor back0 = slice(heads.concat, 1, 0, 2);
  Tensor back1 = slice(heads.concat, 1, 2, 2);
  CHECK(testutil::bit_identical(back0, o1));
  CHECK(testutil::bit_identical(back1, o2));

  Tensor eye(Shape{4, 4});
  for (int i = 0; i < 4; ++i) eye.values()[i * 4 + i] = 1.0;
  CHECK(testutil::bit_identical(aggregate_linear(heads, eye), heads.concat));

  Tensor zero_w(Shape{4, 4});
  Tensor zeroed = aggregate_linear(heads, zero_w);
  for (double v : zeroed.values()) CHECK(v == 0.0);

  Tensor w = randn(Shape{4, 4}, rng);
  const oracle::Mat expect = oracle::matmul(to_mat(heads.concat), to_mat(w));
  Tensor got = aggregate_linear(heads, w);
  for (int j = 0; j < 3; ++j) {
    for (int i = 0; i < 4; ++i) {
      CHECK(got.at({j, i}) == doctest::Approx(expect[static_cast<std::size_t>(j)]
                                                    [static_cast<std::size_t>(i)])
                                  .epsilon(1e-13));
    }
  }
}

TEST_CASE("multi-head attention with identity W_O and one head reduces to "
          "scaled dot attention") {
  const int d = 4;
  AttentionParams params;
  Tensor eye_proj(Shape{d, d});
  for (int i = 0; i < d; ++i) eye_proj.values()[i * d + i] = 1.0;
  params.w_q.push_back(eye_proj);
  params.w_k.push_back(eye_proj);
  params.w_v.push_back(eye_proj);
  params.w_o = eye_proj;
  Rng rng(31);
  Tensor x = randn(Shape{3, d}, rng);
  Aggregation agg;
  Tensor out = multi_head_attention(x, x, x, params, agg);
  AttentionResult direct = scaled_dot_attention(x, x, x);
  CHECK(testutil::bit_identical(out, direct.output));
}

TEST_CASE("routed aggregation with one head and one capsule squashes the vote") {
  const int d = 4;
  AttentionParams params;
  Tensor eye_proj(Shape{d, d});
  for (int i = 0; i < d; ++i) eye_proj.values()[i * d + i] = 1.0;
  params.w_q.push_back(eye_proj);
  params.w_k.push_back(eye_proj);
  params.w_v.push_back(eye_proj);
  params.w_o = eye_proj;

  RoutingConfig cfg = routed_config(RoutingKind::kSimple, 1, 1, d, 1);
  Rng rng(37);
  CapsuleParams caps = init_capsule_params(cfg, rng);
  Aggregation agg{Aggregator::kSimpleRouting, &caps, &cfg};

  Tensor x = randn(Shape{3, d}, rng);
  Tensor out = multi_head_attention(x, x, x, params, agg);

  // by hand: the single vote per position, squashed
  Tensor o_hat = scaled_dot_attention(x, x, x).output;
  Tensor capsule = tanh(add(matmul(o_hat, caps.f_weight[0]),
                            expand_leading(caps.f_bias[0], Shape{3})));
  Tensor vote = matmul(capsule, caps.vote_weight[0][0]);
  CHECK(max_abs_diff(out, squash(vote)) < 1e-14);
}

TEST_CASE("multi-head attention rejects missing routing state") {
  Rng rng(41);
  AttentionParams params = init_attention_params(4, 2, rng);
  Tensor x = randn(Shape{2, 4}, rng);
  Aggregation agg;
  agg.kind = Aggregator::kSimpleRouting;
  CHECK_THROWS_AS(multi_head_attention(x, x, x, params, agg), ConfigError);
}

TEST_CASE("output shape is J x d for every aggregator") {
  Rng rng(43);
  const int d = 8, heads = 2;
  AttentionParams params = init_attention_params(d, heads, rng);
  RoutingConfig simple_cfg = routed_config(RoutingKind::kSimple, heads, 4, d, 2);
  RoutingConfig em_cfg = routed_config(RoutingKind::kEm, heads, 4, d, 2);
  CapsuleParams simple_caps = init_capsule_params(simple_cfg, rng);
  CapsuleParams em_caps = init_capsule_params(em_cfg, rng);
  Tensor x = randn(Shape{5, d}, rng);
  for (const Aggregation& agg :
       {Aggregation{Aggregator::kLinear, nullptr, nullptr},
        Aggregation{Aggregator::kSimpleRouting, &simple_caps, &simple_cfg},
        Aggregation{Aggregator::kEmRouting, &em_caps, &em_cfg}}) {
    Tensor out = multi_head_attention(x, x, x, params, agg);
    CHECK(out.shape() == Shape{5, d});
  }
}

TEST_CASE("self-attention is exactly permutation equivariant for all "
          "aggregators") {
  Rng rng(47);
  const int d = 8, heads = 2, rows = 5;
  AttentionParams params = init_attention_params(d, heads, rng);
  RoutingConfig simple_cfg = routed_config(RoutingKind::kSimple, heads, 4, d, 2);
  RoutingConfig em_cfg = routed_config(RoutingKind::kEm, heads, 4, d, 2);
  CapsuleParams simple_caps = init_capsule_params(simple_cfg, rng);
  CapsuleParams em_caps = init_capsule_params(em_cfg, rng);
  Tensor x = randn(Shape{rows, d}, rng);
  std::vector<int> perm{4, 2, 0, 3, 1};
  Tensor permuted(Shape{rows, d});
  for (int j = 0; j < rows; ++j) {
    for (int i = 0; i < d; ++i) {
      permuted.values()[static_cast<std::size_t>(j) * d + i] =
          x.at({perm[static_cast<std::size_t>(j)], i});
    }
  }
  for (const Aggregation& agg :
       {Aggregation{Aggregator::kLinear, nullptr, nullptr},
        Aggregation{Aggregator::kSimpleRouting, &simple_caps, &simple_cfg},
        Aggregation{Aggregator::kEmRouting, &em_caps, &em_cfg}}) {
    Tensor out = multi_head_attention(x, x, x, params, agg);
    Tensor out_perm = multi_head_attention(permuted, permuted, permuted,
                                           params, agg);
    for (int j = 0; j < rows; ++j) {
      for (int i = 0; i < d; ++i) {
        CHECK(out_perm.at({j, i}) ==
              out.at({perm[static_cast<std::size_t>(j)], i}));
      }
    }
  }
}

TEST_CASE("full pipeline gradient checks pass at 1e-4") {
  Rng rng(53);
  const int d = 4, heads = 2;
  AttentionParams params = init_attention_params(d, heads, rng);
  RoutingConfig simple_cfg = routed_config(RoutingKind::kSimple, heads, 2, d, 2);
  RoutingConfig em_cfg = routed_config(RoutingKind::kEm, heads, 2, d, 2);
  CapsuleParams simple_caps = init_capsule_params(simple_cfg, rng);
  CapsuleParams em_caps = init_capsule_params(em_cfg, rng);
  Tensor x = randn(Shape{3, d}, rng);
  for (const Aggregation& agg :
       {Aggregation{Aggregator::kLinear, nullptr, nullptr},
        Aggregation{Aggregator::kSimpleRouting, &simple_caps, &simple_cfg},
        Aggregation{Aggregator::kEmRouting, &em_caps, &em_cfg}}) {
    const double err = grad_check(
        [&](const Tensor& input) {
          return sum_all(square(
              multi_head_attention(input, input, input, params, agg)));
        },
        x);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("additive mask removes padded keys from the mix") {
  Rng rng(59);
  Tensor q = randn(Shape{2, 2}, rng);
  Tensor k = randn(Shape{3, 2}, rng);
  Tensor v = randn(Shape{3, 2}, rng);
  Tensor mask(Shape{2, 3});
  for (int j = 0; j < 2; ++j) mask.values()[static_cast<std::size_t>(j) * 3 + 2] = -1e9;
  AttentionResult r = scaled_dot_attention(q, k, v, mask);
  for (int j = 0; j < 2; ++j) {
    CHECK(r.weights.at({j, 2}) == doctest::Approx(0.0));
    double sum = 0.0;
    for (int m = 0; m < 3; ++m) sum += r.weights.at({j, m});
    CHECK(std::fabs(sum - 1.0) < 1e-12);
  }
}
