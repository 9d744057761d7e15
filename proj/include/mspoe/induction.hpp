// Copyright 2026 The mspoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <utility>

#include "mspoe/harness.hpp"
#include "mspoe/model.hpp"
#include "mspoe/posenc.hpp"

namespace mspoe {

/// Knobs of the hand-built retrieval model. The defaults are the frozen fixture.
struct InductionParams {
  double rope_base = 10000.0;
  double identity_norm = 3.0;
  double flag_norm = 1.0;
  double const_norm = 1.0;

  // Layer 0. The previous-key head sends value tokens to the nearest preceding
  // key; the two-back head sends key and filler tokens to the key two
  // positions back. Both copy the key identity into the previous-key subspace.
  std::size_t prev_head = 3;
  std::array<double, 8> prev_plane_weights{0, 2.83, 2.83, 0, 0, 0, 0, 0};
  double prev_sink = 2.0;
  std::size_t back2_head = 2;
  std::array<double, 8> back2_plane_weights{3, 3, 0, 0, 0, 0, 0, 0};
  double back2_peak = 2.0;
  double back2_sink = 2.0;
  double prev_copy = 1.0;

  // Layer 1 head roles.
  std::size_t sink_head = 0;
  std::size_t primacy_head = 1;
  std::size_t recency_head = 2;
  std::size_t content_head = 3;

  // Content-matching head: query identity against previous-key identity on
  // four slow planes, a recency prior over all non-BOS tokens on the planes
  // with nonzero decay, and a BOS sink on the slowest plane.
  std::size_t content_first_plane = 3;
  double content_query = 1.2;
  std::array<double, 8> content_decay{0, 0, 1.6, 0, 0, 0, 0, 0};
  double content_sink = 1.0;
  double content_copy = 8.0;

  // Position-biased heads keyed on value tokens; the score on one plane
  // peaks at distance phase / theta[plane].
  std::size_t primacy_plane = 2;
  double primacy_gain = 17.0;
  double primacy_phase = 2.42;
  double primacy_copy = 2.0;
  std::size_t recency_plane = 1;
  double recency_gain = 6.0;
  double recency_phase = 0.0;
  double recency_copy = 2.0;
  double sink_gain = 3.0;

  double value_bias = 1.0;
};

inline constexpr std::uint64_t kInductionSeed = 20240229;

namespace induction_layout {
inline constexpr std::size_t kIdDims = 8;
inline constexpr std::size_t kKeyDims = 0;
inline constexpr std::size_t kValueDims = 16;
inline constexpr std::size_t kPrevDims = 32;
inline constexpr std::size_t kBosFlag = 48;
inline constexpr std::size_t kKeyFlag = 49;
inline constexpr std::size_t kValueFlag = 50;
inline constexpr std::size_t kFillerFlag = 51;
inline constexpr std::size_t kConst = 52;
inline constexpr std::size_t kSinkDim = 14;  // slowest rotary plane of a 16-wide head
}  // namespace induction_layout

inline ModelConfig induction_config(const InductionParams& p = {}) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 4;
  c.head_dim = 16;
  c.mlp_dim = 8;
  c.vocab_size = VocabLayout{}.vocab_size();
  c.max_seq_len = 512;
  c.rope = RopeParams{16, p.rope_base};
  c.tied_output = false;
  return c;
}

/// Two-layer model with hand-set weights: a previous-key head in layer 0, and
/// in layer 1 a content-matching head that retrieves the value following the
/// queried key, two heads biased to the first and most recent values, and an
/// attention-sink head. MLPs are zero.
inline std::pair<ModelConfig, Weights> build_induction_model(std::uint64_t seed = kInductionSeed,
                                                             const InductionParams& p = {}) {
  namespace L = induction_layout;
  const ModelConfig cfg = induction_config(p);
  const VocabLayout vocab;
  const std::size_t hd = cfg.head_dim;
  Weights w = Weights::zeros(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  auto unit_identity = [&]() {
    std::array<double, L::kIdDims> v{};
    double n2 = 0.0;
    for (double& x : v) {
      x = normal(rng);
      n2 += x * x;
    }
    for (double& x : v) x /= std::sqrt(n2);
    return v;
  };

  // Embeddings, each row rescaled to unit RMS so the first norm is an identity.
  std::vector<std::array<double, L::kIdDims>> value_ids(cfg.vocab_size);
  for (TokenId t = 0; t < cfg.vocab_size; ++t) {
    auto row = w.token_embedding.row(t);
    row[L::kConst] = p.const_norm;
    if (t == vocab.bos) {
      row[L::kBosFlag] = p.flag_norm;
    } else if (vocab.is_key(t)) {
      const auto id = unit_identity();
      for (std::size_t i = 0; i < L::kIdDims; ++i) row[L::kKeyDims + i] = p.identity_norm * id[i];
      row[L::kKeyFlag] = p.flag_norm;
    } else if (vocab.is_value(t)) {
      value_ids[t] = unit_identity();
      for (std::size_t i = 0; i < L::kIdDims; ++i) {
        row[L::kValueDims + i] = p.identity_norm * value_ids[t][i];
      }
      row[L::kValueFlag] = p.flag_norm;
    } else {
      row[L::kFillerFlag] = p.flag_norm;
    }
    const double scale = std::sqrt(static_cast<double>(cfg.hidden_dim())) / l2_norm(row);
    for (double& x : row) x *= scale;
  }

  const Vector theta = theta_schedule(cfg.rope);

  // Layer 0.
  {
    auto& l0 = w.layers[0];
    const std::size_t p0 = p.prev_head * hd;
    const std::size_t b0 = p.back2_head * hd;
    for (std::size_t plane = 0; plane < 8; ++plane) {
      const double g = p.prev_plane_weights[plane];
      l0.wq(L::kValueFlag, p0 + 2 * plane) = g;
      l0.wk(L::kKeyFlag, p0 + 2 * plane) = g;
      const double b = p.back2_plane_weights[plane];
      const double phase = p.back2_peak * theta[plane];
      l0.wq(L::kKeyFlag, b0 + 2 * plane) = b;
      l0.wq(L::kFillerFlag, b0 + 2 * plane) = b;
      l0.wk(L::kKeyFlag, b0 + 2 * plane) = b * std::cos(phase);
      l0.wk(L::kKeyFlag, b0 + 2 * plane + 1) = b * std::sin(phase);
    }
    for (std::size_t h0 : {p0, b0}) {
      const double sink = h0 == p0 ? p.prev_sink : p.back2_sink;
      l0.wq(L::kConst, h0 + L::kSinkDim) = sink;
      l0.wk(L::kBosFlag, h0 + L::kSinkDim) = sink;
      for (std::size_t i = 0; i < L::kIdDims; ++i) {
        l0.wv(L::kKeyDims + i, h0 + i) = 1.0;
        l0.wo(h0 + i, L::kPrevDims + i) = p.prev_copy;
      }
    }
  }

  // Layer 1.
  {
    auto& l1 = w.layers[1];
    const std::size_t c0 = p.content_head * hd;
    for (std::size_t i = 0; i < L::kIdDims; ++i) {
      const std::size_t dim = c0 + 2 * p.content_first_plane + i;
      l1.wq(L::kKeyDims + i, dim) = p.content_query;
      l1.wk(L::kPrevDims + i, dim) = 1.0;
      l1.wv(L::kValueDims + i, c0 + i) = 1.0;
      l1.wo(c0 + i, L::kValueDims + i) = p.content_copy;
    }
    for (std::size_t plane = 0; plane < 8; ++plane) {
      const double g = p.content_decay[plane];
      if (g == 0.0) continue;
      l1.wq(L::kConst, c0 + 2 * plane) = g;
      for (std::size_t flag : {L::kKeyFlag, L::kValueFlag, L::kFillerFlag}) {
        l1.wk(flag, c0 + 2 * plane) = g;
      }
    }
    l1.wq(L::kConst, c0 + L::kSinkDim) = p.content_sink;
    l1.wk(L::kBosFlag, c0 + L::kSinkDim) = p.content_sink;

    auto positional = [&](std::size_t head, std::size_t plane, double gain, double phase,
                          double copy) {
      const std::size_t h0 = head * hd;
      const double g = std::sqrt(gain);
      l1.wq(L::kConst, h0 + 2 * plane) = g;
      l1.wk(L::kValueFlag, h0 + 2 * plane) = g * std::cos(phase);
      l1.wk(L::kValueFlag, h0 + 2 * plane + 1) = g * std::sin(phase);
      for (std::size_t i = 0; i < L::kIdDims; ++i) {
        l1.wv(L::kValueDims + i, h0 + i) = 1.0;
        l1.wo(h0 + i, L::kValueDims + i) = copy;
      }
    };
    positional(p.primacy_head, p.primacy_plane, p.primacy_gain, p.primacy_phase, p.primacy_copy);
    positional(p.recency_head, p.recency_plane, p.recency_gain, p.recency_phase, p.recency_copy);

    const std::size_t s0 = p.sink_head * hd;
    l1.wq(L::kConst, s0 + L::kSinkDim) = std::sqrt(p.sink_gain);
    l1.wk(L::kBosFlag, s0 + L::kSinkDim) = std::sqrt(p.sink_gain);
  }

  // Unembedding reads the value-identity subspace only.
  for (TokenId t = vocab.value_begin; t < vocab.value_end; ++t) {
    for (std::size_t i = 0; i < L::kIdDims; ++i) w.output(L::kValueDims + i, t) = value_ids[t][i];
    w.output(L::kConst, t) = p.value_bias;
  }
  return {cfg, std::move(w)};
}

}  // namespace mspoe
