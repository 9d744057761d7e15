// Copyright 2026 The mspoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "mspoe/model.hpp"

namespace mspoe {
namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 3;
  c.head_dim = 8;
  c.mlp_dim = 12;
  c.vocab_size = 20;
  c.max_seq_len = 40;
  c.rope = RopeParams{8, 10000.0};
  return c;
}

std::vector<TokenId> random_tokens(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::uniform_int_distribution<TokenId> t(0, static_cast<TokenId>(vocab - 1));
  std::vector<TokenId> out(n);
  for (auto& x : out) x = t(rng);
  return out;
}

std::vector<PositionEncoderSpec> all_encoders(const ModelConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> r(0.5, 2.5);
  std::vector<std::vector<double>> ratios(c.n_layers, std::vector<double>(c.n_heads));
  for (auto& row : ratios) {
    for (double& x : row) x = r(rng);
  }
  return {PositionEncoderSpec::standard(), PositionEncoderSpec::uniform(1.7),
          PositionEncoderSpec::grouped(2, 3),
          PositionEncoderSpec::multi_scale(RatioAssignment(ratios))};
}

// Straight-line forward pass over the whole sequence with no cache; returns
// the logits of the last token and the last-row attention per layer/head.
struct Reference {
  std::vector<double> logits;
  std::vector<std::vector<std::vector<double>>> last_rows;
};

Reference reference_forward(const ModelConfig& c, const Weights& w,
                            const std::vector<TokenId>& tokens, const PositionEncoderSpec& enc) {
  const std::size_t n = tokens.size();
  const std::size_t h = c.hidden_dim();
  const std::size_t d = c.head_dim;
  auto norm = [&](const std::vector<double>& v, const Vector& g) {
    double ss = 0.0;
    for (double x : v) ss += x * x;
    const double denom = std::sqrt(ss / static_cast<double>(v.size()) + kNormEps);
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * g[i] / denom;
    return out;
  };
  auto times = [](const std::vector<double>& v, const Matrix& m) {
    std::vector<double> out(m.cols(), 0.0);
    for (std::size_t j = 0; j < m.cols(); ++j) {
      for (std::size_t k = 0; k < v.size(); ++k) out[j] += v[k] * m(k, j);
    }
    return out;
  };

  std::vector<std::vector<double>> x(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = w.token_embedding.row(tokens[i]);
    x[i].assign(row.begin(), row.end());
  }
  Reference ref;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& L = w.layers[l];
    std::vector<std::vector<double>> q(n), k(n), v(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto xn = norm(x[i], L.attn_norm);
      q[i] = times(xn, L.wq);
      k[i] = times(xn, L.wk);
      v[i] = times(xn, L.wv);
    }
    std::vector<std::vector<double>> attn(n, std::vector<double>(h, 0.0));
    ref.last_rows.emplace_back();
    for (std::size_t hd = 0; hd < c.n_heads; ++hd) {
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> scores(i + 1);
        for (std::size_t j = 0; j <= i; ++j) {
          const auto pos = map_position(enc, l, hd, static_cast<std::int64_t>(i),
                                        static_cast<std::int64_t>(j));
          const Vector qh(std::vector<double>(q[i].begin() + hd * d, q[i].begin() + (hd + 1) * d));
          const Vector kh(std::vector<double>(k[j].begin() + hd * d, k[j].begin() + (hd + 1) * d));
          scores[j] = attention_score(qh, kh, pos.query, pos.key, c.rope) / std::sqrt(double(d));
        }
        double hi = scores[0];
        for (double s : scores) hi = std::max(hi, s);
        double total = 0.0;
        for (double& s : scores) total += (s = std::exp(s - hi));
        for (double& s : scores) s /= total;
        for (std::size_t j = 0; j <= i; ++j) {
          for (std::size_t e = 0; e < d; ++e) attn[i][hd * d + e] += scores[j] * v[j][hd * d + e];
        }
        if (i + 1 == n) ref.last_rows.back().push_back(scores);
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto o = times(attn[i], L.wo);
      for (std::size_t e = 0; e < h; ++e) x[i][e] += o[e];
      const auto xn = norm(x[i], L.mlp_norm);
      const auto g = times(xn, L.w_gate);
      const auto u = times(xn, L.w_up);
      std::vector<double> act(c.mlp_dim);
      for (std::size_t e = 0; e < c.mlp_dim; ++e) act[e] = g[e] / (1.0 + std::exp(-g[e])) * u[e];
      const auto down = times(act, L.w_down);
      for (std::size_t e = 0; e < h; ++e) x[i][e] += down[e];
    }
  }
  const auto last = norm(x[n - 1], w.final_norm);
  if (c.tied_output) {
    for (std::size_t t = 0; t < c.vocab_size; ++t) {
      double acc = 0.0;
      for (std::size_t e = 0; e < h; ++e) acc += last[e] * w.token_embedding(t, e);
      ref.logits.push_back(acc);
    }
  } else {
    ref.logits = times(last, w.output);
  }
  return ref;
}

TEST(Model, SingleTokenSnapshotIsOne) {
  const auto c = small_config();
  const Model m(c, Weights::random(c, 1));
  const std::vector<TokenId> t{3};
  const auto r = m.forward_prefill(t, PositionEncoderSpec::standard(), true);
  ASSERT_TRUE(r.snapshot);
  EXPECT_EQ(r.snapshot->context_len, 1u);
  for (const auto& layer : r.snapshot->rows) {
    for (const auto& row : layer) {
      ASSERT_EQ(row.size(), 1u);
      EXPECT_EQ(row[0], 1.0);
    }
  }
}

TEST(Model, UniformOneIsBitwiseStandard) {
  const auto c = small_config();
  const Model m(c, Weights::random(c, 2));
  std::mt19937_64 rng(2);
  const auto t = random_tokens(rng, 25, c.vocab_size);
  const auto a = m.forward_prefill(t, PositionEncoderSpec::standard());
  const auto b = m.forward_prefill(t, PositionEncoderSpec::uniform(1.0));
  EXPECT_EQ(a.logits, b.logits);
}

TEST(Model, PrefillMatchesReferenceForEveryEncoder) {
  for (bool tied : {true, false}) {
    auto c = small_config();
    c.tied_output = tied;
    const Weights w = Weights::random(c, 3);
    const Model m(c, w);
    std::mt19937_64 rng(3);
    for (const auto& enc : all_encoders(c, 3)) {
      const auto t = random_tokens(rng, 17, c.vocab_size);
      const auto got = m.forward_prefill(t, enc, true);
      const auto ref = reference_forward(c, w, t, enc);
      for (std::size_t i = 0; i < c.vocab_size; ++i) {
        EXPECT_NEAR(got.logits[i], ref.logits[i], 1e-9) << enc.label();
      }
      for (std::size_t l = 0; l < c.n_layers; ++l) {
        for (std::size_t h = 0; h < c.n_heads; ++h) {
          const auto& row = got.snapshot->row(l, h);
          for (std::size_t j = 0; j < row.size(); ++j) {
            EXPECT_NEAR(row[j], ref.last_rows[l][h][j], 1e-12);
          }
        }
      }
    }
  }
}

TEST(Model, DecodeMatchesFullRecompute) {
  const auto c = small_config();
  const Model m(c, Weights::random(c, 4));
  std::mt19937_64 rng(4);
  for (const auto& enc : all_encoders(c, 4)) {
    const auto t = random_tokens(rng, 20, c.vocab_size);
    auto state = m.forward_prefill(std::span<const TokenId>(t).first(12), enc);
    for (std::size_t i = 12; i < t.size(); ++i) {
      const Vector step = m.forward_decode_step(t[i], state.cache, enc);
      const auto full = m.forward_prefill(std::span<const TokenId>(t).first(i + 1), enc);
      for (std::size_t v = 0; v < c.vocab_size; ++v) {
        EXPECT_NEAR(step[v], full.logits[v], 1e-9) << enc.label();
      }
    }
    EXPECT_EQ(state.cache.current_len(), t.size());
  }
}

TEST(Model, ZeroWeightsGiveUniformLogits) {
  const auto c = small_config();
  const Model m(c, Weights::zeros(c));
  const std::vector<TokenId> t{1, 2, 3};
  auto state = m.forward_prefill(t, PositionEncoderSpec::standard());
  for (double x : state.logits) EXPECT_EQ(x, state.logits[0]);
  const Vector step = m.forward_decode_step(4, state.cache, PositionEncoderSpec::standard());
  for (double x : step) EXPECT_EQ(x, step[0]);
  EXPECT_EQ(m.greedy_generate(t, PositionEncoderSpec::standard(), 3),
            (std::vector<TokenId>{0, 0, 0}));
}

TEST(Model, GenerationIsDeterministic) {
  const auto c = small_config();
  const Model m(c, Weights::random(c, 5));
  const std::vector<TokenId> t{1, 5, 9, 2};
  for (const auto& enc : all_encoders(c, 5)) {
    auto a = m.forward_prefill(t, enc);
    auto b = m.forward_prefill(t, enc);
    EXPECT_EQ(a.logits, b.logits);
    EXPECT_EQ(a.cache, b.cache);
    EXPECT_EQ(m.greedy_generate(t, enc, 6), m.greedy_generate(t, enc, 6));
  }
  EXPECT_TRUE(m.greedy_generate(t, PositionEncoderSpec::standard(), 0).empty());
}

TEST(Model, CausalityUnderPerturbation) {
  const auto c = small_config();
  const Model m(c, Weights::random(c, 6));
  std::mt19937_64 rng(6);
  for (const auto& enc : all_encoders(c, 6)) {
    const auto a = random_tokens(rng, 16, c.vocab_size);
    auto b = a;
    const std::size_t t = 9;
    for (std::size_t i = t + 1; i < b.size(); ++i) b[i] = (b[i] + 7) % c.vocab_size;
    const auto pa = m.forward_prefill(a, enc);
    const auto pb = m.forward_prefill(b, enc);
    const auto prefix = m.forward_prefill(std::span<const TokenId>(a).first(t + 1), enc);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        for (std::size_t p = 0; p <= t; ++p) {
          const auto ka = pa.cache.key(l, h, p), kb = pb.cache.key(l, h, p);
          const auto va = pa.cache.value(l, h, p), vb = pb.cache.value(l, h, p);
          EXPECT_TRUE(std::equal(ka.begin(), ka.end(), kb.begin()));
          EXPECT_TRUE(std::equal(va.begin(), va.end(), vb.begin()));
        }
      }
    }
    // Position t's logits from the prefix equal a decode replay of the same prefix.
    auto replay = m.forward_prefill(std::span<const TokenId>(b).first(t), enc);
    const Vector step = m.forward_decode_step(b[t], replay.cache, enc);
    for (std::size_t v = 0; v < c.vocab_size; ++v) EXPECT_NEAR(step[v], prefix.logits[v], 1e-9);
  }
}

TEST(Model, CacheStoresUnrotatedKeys) {
  const auto c = small_config();
  const Weights w = Weights::random(c, 7);
  const Model m(c, w);
  const std::vector<TokenId> t{4, 8, 15, 16, 2, 3};
  const auto a = m.forward_prefill(t, PositionEncoderSpec::standard());
  const auto b = m.forward_prefill(t, PositionEncoderSpec::uniform(2.0));
  // Layer 0 inputs do not depend on the encoder, so stored keys must agree.
  for (std::size_t h = 0; h < c.n_heads; ++h) {
    EXPECT_EQ(a.cache.raw_keys(0, h), b.cache.raw_keys(0, h));
  }
  // And they equal the plain projection of the normalised embedding.
  for (std::size_t p = 0; p < t.size(); ++p) {
    const Vector xn = rms_norm(w.token_embedding.row(t[p]), w.layers[0].attn_norm.span(), kNormEps);
    const Vector k = vecmat(xn.span(), w.layers[0].wk);
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      const auto stored = a.cache.key(0, h, p);
      for (std::size_t e = 0; e < c.head_dim; ++e) EXPECT_EQ(stored[e], k[h * c.head_dim + e]);
    }
  }
}

TEST(Model, SwitchingEncoderLeavesStoredBytesUnchanged) {
  const auto c = small_config();
  const Model m(c, Weights::random(c, 8));
  const std::vector<TokenId> t{1, 2, 3, 4, 5, 6, 7};
  auto state = m.forward_prefill(t, PositionEncoderSpec::standard());
  const KVCache before = state.cache;
  RatioAssignment ratios(c.n_layers, c.n_heads, 1.6);
  m.forward_decode_step(9, state.cache, PositionEncoderSpec::multi_scale(ratios));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      for (std::size_t p = 0; p < t.size(); ++p) {
        const auto k0 = before.key(l, h, p), k1 = state.cache.key(l, h, p);
        const auto v0 = before.value(l, h, p), v1 = state.cache.value(l, h, p);
        EXPECT_TRUE(std::equal(k0.begin(), k0.end(), k1.begin()));
        EXPECT_TRUE(std::equal(v0.begin(), v0.end(), v1.begin()));
      }
    }
  }
}

TEST(Model, SnapshotRowsAreDistributions) {
  const auto c = small_config();
  const Model m(c, Weights::random(c, 9, 1.0));
  std::mt19937_64 rng(9);
  for (const auto& enc : all_encoders(c, 9)) {
    const auto t = random_tokens(rng, 30, c.vocab_size);
    const auto r = m.forward_prefill(t, enc, true);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        const auto& row = r.snapshot->row(l, h);
        EXPECT_EQ(row.size(), t.size());
        EXPECT_NO_THROW(require_distribution(row.span(), 1e-9));
      }
    }
  }
}

TEST(Model, InPlaceWithUnitRatiosEqualsStandard) {
  const auto c = small_config();
  const Model m(c, Weights::random(c, 10));
  const std::vector<TokenId> t{3, 1, 4, 1, 5, 9, 2, 6};
  const auto [r, ratios] = m.forward_prefill_in_place(
      t, PositionEncoderSpec::standard(),
      [&](std::size_t, const std::vector<Vector>&) { return std::vector<double>(c.n_heads, 1.0); });
  const auto ref = m.forward_prefill(t, PositionEncoderSpec::standard(), true);
  EXPECT_EQ(r.logits, ref.logits);
  EXPECT_EQ(*r.snapshot, *ref.snapshot);
  EXPECT_EQ(ratios, RatioAssignment(c.n_layers, c.n_heads, 1.0));
}

TEST(Model, InPlaceAppliesEachLayersRatiosBeforeTheNext) {
  const auto c = small_config();
  const Model m(c, Weights::random(c, 11));
  const std::vector<TokenId> t{3, 1, 4, 1, 5, 9, 2, 6};
  const RatioAssignment target(std::vector<std::vector<double>>{{1.2, 1.5, 1.8}, {1.8, 1.2, 1.5}});
  const auto [r, ratios] = m.forward_prefill_in_place(
      t, PositionEncoderSpec::standard(),
      [&](std::size_t l, const std::vector<Vector>&) { return target.layer(l); });
  EXPECT_EQ(ratios, target);
  const auto ref = m.forward_prefill(t, PositionEncoderSpec::multi_scale(target));
  EXPECT_EQ(r.logits, ref.logits);
  EXPECT_EQ(r.cache, ref.cache);
}

TEST(Model, InputValidation) {
  const auto c = small_config();
  const Model m(c, Weights::random(c, 12));
  const std::vector<TokenId> empty;
  EXPECT_THROW(m.forward_prefill(empty, PositionEncoderSpec::standard()), ValidationError);
  const std::vector<TokenId> too_long(c.max_seq_len + 1, 1);
  EXPECT_THROW(m.forward_prefill(too_long, PositionEncoderSpec::standard()), ValidationError);
  const std::vector<TokenId> bad{1, static_cast<TokenId>(c.vocab_size)};
  EXPECT_THROW(m.forward_prefill(bad, PositionEncoderSpec::standard()), ValidationError);
  const auto wrong = PositionEncoderSpec::multi_scale(RatioAssignment(1, c.n_heads, 1.5));
  const std::vector<TokenId> ok{1, 2};
  EXPECT_THROW(m.forward_prefill(ok, wrong), CoverageError);

  KVCache fresh(c.n_layers, c.n_heads, c.head_dim, c.max_seq_len);
  EXPECT_THROW(m.forward_decode_step(1, fresh, PositionEncoderSpec::standard()), ValidationError);
  const std::vector<TokenId> full(c.max_seq_len, 1);
  auto state = m.forward_prefill(full, PositionEncoderSpec::standard());
  EXPECT_THROW(m.forward_decode_step(1, state.cache, PositionEncoderSpec::standard()),
               ValidationError);
  EXPECT_EQ(state.cache.current_len(), c.max_seq_len);
}

TEST(Model, RejectsBadConfigAndShapes) {
  auto c = small_config();
  c.head_dim = 7;
  c.rope.head_dim = 7;
  EXPECT_THROW(c.validate(), ConfigError);
  const auto good = small_config();
  Weights w = Weights::random(good, 13);
  w.layers[1].wq = Matrix(3, 3);
  EXPECT_THROW(Model(good, w), ShapeError);
}

TEST(AttentionSnapshot, JsonRoundTrip) {
  const auto c = small_config();
  const Model m(c, Weights::random(c, 14));
  const std::vector<TokenId> t{5, 6, 7};
  const auto r = m.forward_prefill(t, PositionEncoderSpec::standard(), true);
  EXPECT_EQ(AttentionSnapshot::from_json(r.snapshot->to_json()), *r.snapshot);
  EXPECT_THROW(r.snapshot->row(2, 0), CoverageError);
}

}  // namespace
}  // namespace mspoe
