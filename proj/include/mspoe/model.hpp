// Copyright 2026 The mspoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mspoe/error.hpp"
#include "mspoe/numerics.hpp"
#include "mspoe/posenc.hpp"

namespace mspoe {

using TokenId = std::uint32_t;

inline constexpr double kNormEps = 1e-6;

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t head_dim = 16;
  std::size_t mlp_dim = 32;
  std::size_t vocab_size = 64;
  std::size_t max_seq_len = 512;
  RopeParams rope{16, 10000.0};
  bool tied_output = true;

  std::size_t hidden_dim() const noexcept { return n_heads * head_dim; }

  void validate() const {
    if (n_layers == 0 || n_heads == 0 || mlp_dim == 0 || vocab_size == 0 || max_seq_len == 0) {
      throw ConfigError("model dimensions must be positive");
    }
    if (head_dim == 0 || head_dim % 2 != 0) {
      throw ConfigError("head_dim must be even and positive, got " + std::to_string(head_dim));
    }
    if (rope.head_dim != head_dim) throw ConfigError("rope.head_dim must equal head_dim");
    rope.validate();
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
  Vector attn_norm;
  Matrix wq, wk, wv, wo;  // hidden x hidden; head h owns columns [h*head_dim, (h+1)*head_dim)
  Vector mlp_norm;
  Matrix w_gate, w_up;  // hidden x mlp
  Matrix w_down;        // mlp x hidden

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct Weights {
  Matrix token_embedding;  // vocab x hidden
  std::vector<LayerWeights> layers;
  Vector final_norm;
  Matrix output;  // hidden x vocab; empty when tied to the embedding

  /// Unit norm gains, every matrix zero.
  static Weights zeros(const ModelConfig& c) {
    const std::size_t h = c.hidden_dim();
    Weights w;
    w.token_embedding = Matrix(c.vocab_size, h);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      w.layers.push_back(LayerWeights{Vector(h, 1.0), Matrix(h, h), Matrix(h, h), Matrix(h, h),
                                      Matrix(h, h), Vector(h, 1.0), Matrix(h, c.mlp_dim),
                                      Matrix(h, c.mlp_dim), Matrix(c.mlp_dim, h)});
    }
    w.final_norm = Vector(h, 1.0);
    if (!c.tied_output) w.output = Matrix(h, c.vocab_size);
    return w;
  }

  /// Gaussian weights with standard deviation `scale`, unit norm gains.
  static Weights random(const ModelConfig& c, std::uint64_t seed, double scale = 0.3) {
    Weights w = zeros(c);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, scale);
    auto fill = [&](Matrix& m) {
      for (double& x : m.span()) x = normal(rng);
    };
    fill(w.token_embedding);
    for (auto& layer : w.layers) {
      for (Matrix* m : {&layer.wq, &layer.wk, &layer.wv, &layer.wo, &layer.w_gate, &layer.w_up,
                        &layer.w_down}) {
        fill(*m);
      }
    }
    if (!c.tied_output) fill(w.output);
    return w;
  }

  friend bool operator==(const Weights&, const Weights&) = default;
};

/// Throws ShapeError / ValidationError when `w` does not fit `c` or holds non-finite values.
inline void validate_weights(const ModelConfig& c, const Weights& w) {
  c.validate();
  const std::size_t h = c.hidden_dim();
  auto check = [](const Matrix& m, std::size_t r, std::size_t cols, const std::string& name) {
    if (m.rows() != r || m.cols() != cols) {
      throw ShapeError(name + " is " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                       ", expected " + std::to_string(r) + "x" + std::to_string(cols));
    }
    if (!all_finite(m.span())) throw ValidationError(name + " holds non-finite values");
  };
  auto check_vec = [](const Vector& v, std::size_t n, const std::string& name) {
    if (v.size() != n) throw ShapeError(name + " has wrong length");
    if (!all_finite(v.span())) throw ValidationError(name + " holds non-finite values");
  };
  check(w.token_embedding, c.vocab_size, h, "token_embedding");
  if (w.layers.size() != c.n_layers) throw ShapeError("layer count does not match config");
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& L = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    check_vec(L.attn_norm, h, p + "attn_norm");
    check(L.wq, h, h, p + "wq");
    check(L.wk, h, h, p + "wk");
    check(L.wv, h, h, p + "wv");
    check(L.wo, h, h, p + "wo");
    check_vec(L.mlp_norm, h, p + "mlp_norm");
    check(L.w_gate, h, c.mlp_dim, p + "w_gate");
    check(L.w_up, h, c.mlp_dim, p + "w_up");
    check(L.w_down, c.mlp_dim, h, p + "w_down");
  }
  check_vec(w.final_norm, h, "final_norm");
  if (c.tied_output) {
    if (w.output.rows() != 0 || w.output.cols() != 0) {
      throw ShapeError("tied model must not carry an output matrix");
    }
  } else {
    check(w.output, h, c.vocab_size, "output");
  }
}

/// Unrotated keys and values, per layer and head, in token order.
class KVCache {
 public:
  KVCache() = default;
  KVCache(std::size_t n_layers, std::size_t n_heads, std::size_t head_dim, std::size_t max_len)
      : n_heads_(n_heads),
        head_dim_(head_dim),
        max_len_(max_len),
        keys_(n_layers * n_heads),
        values_(n_layers * n_heads) {}

  std::size_t current_len() const noexcept { return len_; }
  std::size_t max_len() const noexcept { return max_len_; }
  std::size_t n_layers() const noexcept { return n_heads_ == 0 ? 0 : keys_.size() / n_heads_; }
  std::size_t n_heads() const noexcept { return n_heads_; }
  std::size_t head_dim() const noexcept { return head_dim_; }

  std::span<const double> key(std::size_t layer, std::size_t head, std::size_t pos) const {
    return {keys_[layer * n_heads_ + head].data() + pos * head_dim_, head_dim_};
  }
  std::span<const double> value(std::size_t layer, std::size_t head, std::size_t pos) const {
    return {values_[layer * n_heads_ + head].data() + pos * head_dim_, head_dim_};
  }

  /// Raw storage of one (layer, head) key stream; used to check that it is never rewritten.
  const std::vector<double>& raw_keys(std::size_t layer, std::size_t head) const {
    return keys_[layer * n_heads_ + head];
  }

  void append(std::size_t layer, std::size_t head, std::span<const double> k,
              std::span<const double> v) {
    auto& ks = keys_[layer * n_heads_ + head];
    auto& vs = values_[layer * n_heads_ + head];
    ks.insert(ks.end(), k.begin(), k.end());
    vs.insert(vs.end(), v.begin(), v.end());
  }

  /// Declares `n` more positions filled in every (layer, head) stream.
  void commit(std::size_t n) { len_ += n; }

  friend bool operator==(const KVCache&, const KVCache&) = default;

 private:
  std::size_t n_heads_ = 0;
  std::size_t head_dim_ = 0;
  std::size_t max_len_ = 0;
  std::size_t len_ = 0;
  std::vector<std::vector<double>> keys_;
  std::vector<std::vector<double>> values_;
};

/// Post-softmax attention of the last prompt token, per layer and head.
struct AttentionSnapshot {
  std::size_t context_len = 0;
  std::vector<std::vector<Vector>> rows;  // [layer][head]

  std::size_t n_layers() const noexcept { return rows.size(); }

  const Vector& row(std::size_t layer, std::size_t head) const {
    if (layer >= rows.size() || head >= rows[layer].size() || rows[layer][head].empty()) {
      throw CoverageError("snapshot is missing layer " + std::to_string(layer) + ", head " +
                          std::to_string(head));
    }
    return rows[layer][head];
  }

  nlohmann::json to_json() const {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& layer : rows) {
      nlohmann::json heads = nlohmann::json::array();
      for (const auto& r : layer) heads.push_back(r.values());
      layers.push_back(std::move(heads));
    }
    return {{"context_len", context_len}, {"attention", std::move(layers)}};
  }

  static AttentionSnapshot from_json(const nlohmann::json& j) {
    AttentionSnapshot s;
    s.context_len = j.at("context_len").get<std::size_t>();
    for (const auto& layer : j.at("attention")) {
      std::vector<Vector> heads;
      for (const auto& r : layer) heads.emplace_back(r.get<std::vector<double>>());
      s.rows.push_back(std::move(heads));
    }
    return s;
  }

  friend bool operator==(const AttentionSnapshot&, const AttentionSnapshot&) = default;
};

struct PrefillResult {
  Vector logits;  // of the last prompt token
  KVCache cache;
  std::optional<AttentionSnapshot> snapshot;
};

/// Called once per layer during an in-place prefill with the layer's baseline
/// last-query attention rows; returns that layer's per-head ratios.
using LayerRatioHook =
    std::function<std::vector<double>(std::size_t layer, const std::vector<Vector>& head_rows)>;

/// Decoder-only transformer: pre-norm RMSNorm blocks, rotary causal
/// self-attention and a SiLU-gated MLP.
class Model {
 public:
  Model(ModelConfig config, Weights weights)
      : config_(std::move(config)), weights_(std::move(weights)) {
    validate_weights(config_, weights_);
    theta_ = theta_schedule(config_.rope);
  }

  const ModelConfig& config() const noexcept { return config_; }
  const Weights& weights() const noexcept { return weights_; }

  PrefillResult forward_prefill(std::span<const TokenId> tokens, const PositionEncoderSpec& encoder,
                                bool capture = false) const {
    check_prompt(tokens);
    check_encoder(encoder);
    PrefillResult result{Vector{}, empty_cache(), std::nullopt};
    if (capture) result.snapshot = empty_snapshot(tokens.size());
    Matrix x = embed(tokens);
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      auto* rows = capture ? &result.snapshot->rows[l] : nullptr;
      layer_step(l, x, result.cache, encoder, rows);
    }
    result.cache.commit(tokens.size());
    result.logits = logits_of(x.row(x.rows() - 1));
    return result;
  }

  /// Single prefill in which each layer is first scored under `baseline`, then
  /// recomputed with the ratios `hook` returns before feeding the next layer.
  std::pair<PrefillResult, RatioAssignment> forward_prefill_in_place(
      std::span<const TokenId> tokens, const PositionEncoderSpec& baseline,
      const LayerRatioHook& hook) const {
    check_prompt(tokens);
    check_encoder(baseline);
    PrefillResult result{Vector{}, empty_cache(), empty_snapshot(tokens.size())};
    RatioAssignment assignment(config_.n_layers, config_.n_heads, 1.0);
    Matrix x = embed(tokens);
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      const Matrix normed = normalize_rows(x, weights_.layers[l].attn_norm);
      const Projections p = project(l, normed);
      auto& rows = result.snapshot->rows[l];
      const std::size_t last = tokens.size() - 1;
      for (std::size_t h = 0; h < config_.n_heads; ++h) {
        rows[h] = attend_row(l, h, last, p, result.cache, 0, baseline, nullptr);
      }
      assignment.set_layer(l, hook(l, rows));
      const auto spec = PositionEncoderSpec::multi_scale(assignment);
      finish_layer(l, x, p, result.cache, spec, nullptr);
    }
    result.cache.commit(tokens.size());
    result.logits = logits_of(x.row(x.rows() - 1));
    return {std::move(result), std::move(assignment)};
  }

  Vector forward_decode_step(TokenId token, KVCache& cache,
                             const PositionEncoderSpec& encoder) const {
    if (cache.current_len() < 1) throw ValidationError("decode needs a prefilled cache");
    if (cache.current_len() + 1 > config_.max_seq_len) {
      throw ValidationError("decode would exceed max_seq_len " +
                            std::to_string(config_.max_seq_len));
    }
    check_encoder(encoder);
    const TokenId one[] = {token};
    check_tokens(one);
    Matrix x = embed(one);
    for (std::size_t l = 0; l < config_.n_layers; ++l) layer_step(l, x, cache, encoder, nullptr);
    cache.commit(1);
    return logits_of(x.row(0));
  }

  /// Greedy continuation from an existing prefill; argmax ties go to the lowest id.
  std::vector<TokenId> generate_from(PrefillResult& state, const PositionEncoderSpec& encoder,
                                     std::size_t max_new) const {
    std::vector<TokenId> out;
    if (max_new == 0) return out;
    out.push_back(static_cast<TokenId>(argmax(state.logits.span())));
    while (out.size() < max_new) {
      state.logits = forward_decode_step(out.back(), state.cache, encoder);
      out.push_back(static_cast<TokenId>(argmax(state.logits.span())));
    }
    return out;
  }

  std::vector<TokenId> greedy_generate(std::span<const TokenId> tokens,
                                       const PositionEncoderSpec& encoder,
                                       std::size_t max_new) const {
    PrefillResult state = forward_prefill(tokens, encoder, false);
    return generate_from(state, encoder, max_new);
  }

 private:
  struct Projections {
    Matrix q, k, v;  // new positions x hidden
  };

  void check_tokens(std::span<const TokenId> tokens) const {
    for (TokenId t : tokens) {
      if (t >= config_.vocab_size) {
        throw ValidationError("token id " + std::to_string(t) + " outside vocab of " +
                              std::to_string(config_.vocab_size));
      }
    }
  }

  void check_prompt(std::span<const TokenId> tokens) const {
    if (tokens.empty()) throw ValidationError("prompt must hold at least one token");
    if (tokens.size() > config_.max_seq_len) {
      throw ValidationError("prompt of " + std::to_string(tokens.size()) +
                            " tokens exceeds max_seq_len " + std::to_string(config_.max_seq_len));
    }
    check_tokens(tokens);
  }

  void check_encoder(const PositionEncoderSpec& encoder) const {
    if (const auto* ms = std::get_if<PositionEncoderSpec::MultiScale>(&encoder.kind)) {
      ms->assignment.require_covers(config_.n_layers, config_.n_heads);
    }
  }

  KVCache empty_cache() const {
    return KVCache(config_.n_layers, config_.n_heads, config_.head_dim, config_.max_seq_len);
  }

  AttentionSnapshot empty_snapshot(std::size_t context_len) const {
    AttentionSnapshot s;
    s.context_len = context_len;
    s.rows.assign(config_.n_layers, std::vector<Vector>(config_.n_heads));
    return s;
  }

  Matrix embed(std::span<const TokenId> tokens) const {
    const std::size_t h = config_.hidden_dim();
    Matrix x(tokens.size(), h);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const auto src = weights_.token_embedding.row(tokens[i]);
      std::copy(src.begin(), src.end(), x.row(i).begin());
    }
    return x;
  }

  static Matrix normalize_rows(const Matrix& x, const Vector& gain) {
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      const Vector n = rms_norm(x.row(i), gain.span(), kNormEps);
      std::copy(n.begin(), n.end(), out.row(i).begin());
    }
    return out;
  }

  Projections project(std::size_t layer, const Matrix& normed) const {
    const auto& L = weights_.layers[layer];
    return {matmul(normed, L.wq), matmul(normed, L.wk), matmul(normed, L.wv)};
  }

  std::span<const double> head_slice(const Matrix& m, std::size_t row, std::size_t head) const {
    return m.row(row).subspan(head * config_.head_dim, config_.head_dim);
  }

  // Attention weights of the query at absolute position `pos` (row `pos - first`
  // of `p`) over cache positions [0, pos]; writes the weighted value sum to `out`.
  Vector attend_row(std::size_t layer, std::size_t head, std::size_t pos, const Projections& p,
                    const KVCache& cache, std::size_t first, const PositionEncoderSpec& encoder,
                    std::span<double>* out) const {
    const std::size_t d = config_.head_dim;
    const auto qpos = static_cast<std::int64_t>(pos);
    const double q_eff = map_position(encoder, layer, head, qpos, qpos).query;
    Vector q_rot(d);
    rotate_into(head_slice(p.q, pos - first, head), q_eff, theta_.span(), q_rot.span());

    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    Vector scores(pos + 1);
    Vector k_rot(d);
    for (std::size_t j = 0; j <= pos; ++j) {
      const double k_eff =
          map_position(encoder, layer, head, qpos, static_cast<std::int64_t>(j)).key;
      const auto k = j < first ? cache.key(layer, head, j) : head_slice(p.k, j - first, head);
      rotate_into(k, k_eff, theta_.span(), k_rot.span());
      scores[j] = dot(q_rot.span(), k_rot.span()) * scale;
    }
    Vector weights = softmax(scores);
    if (out != nullptr) {
      std::fill(out->begin(), out->end(), 0.0);
      for (std::size_t j = 0; j <= pos; ++j) {
        const auto v = j < first ? cache.value(layer, head, j) : head_slice(p.v, j - first, head);
        for (std::size_t i = 0; i < d; ++i) (*out)[i] += weights[j] * v[i];
      }
    }
    return weights;
  }

  // Appends the new positions' keys/values to the cache, runs attention and the
  // MLP, and updates `x` in place.
  void finish_layer(std::size_t layer, Matrix& x, const Projections& p, KVCache& cache,
                    const PositionEncoderSpec& encoder, std::vector<Vector>* capture) const {
    const auto& L = weights_.layers[layer];
    const std::size_t first = cache.current_len();
    const std::size_t n_new = x.rows();
    const std::size_t d = config_.head_dim;

    Matrix attn(n_new, config_.hidden_dim());
    for (std::size_t i = 0; i < n_new; ++i) {
      const std::size_t pos = first + i;
      for (std::size_t h = 0; h < config_.n_heads; ++h) {
        auto out = attn.row(i).subspan(h * d, d);
        Vector w = attend_row(layer, h, pos, p, cache, first, encoder, &out);
        if (capture != nullptr && i + 1 == n_new) (*capture)[h] = std::move(w);
      }
    }
    for (std::size_t i = 0; i < n_new; ++i) {
      for (std::size_t h = 0; h < config_.n_heads; ++h) {
        cache.append(layer, h, head_slice(p.k, i, h), head_slice(p.v, i, h));
      }
    }
    const Matrix o = matmul(attn, L.wo);
    for (std::size_t i = 0; i < n_new; ++i) {
      for (std::size_t c = 0; c < x.cols(); ++c) x(i, c) += o(i, c);
    }

    const Matrix normed = normalize_rows(x, L.mlp_norm);
    const Matrix gate = matmul(normed, L.w_gate);
    const Matrix up = matmul(normed, L.w_up);
    Matrix act(n_new, config_.mlp_dim);
    for (std::size_t i = 0; i < n_new; ++i) {
      for (std::size_t c = 0; c < config_.mlp_dim; ++c) act(i, c) = silu(gate(i, c)) * up(i, c);
    }
    const Matrix down = matmul(act, L.w_down);
    for (std::size_t i = 0; i < n_new; ++i) {
      for (std::size_t c = 0; c < x.cols(); ++c) x(i, c) += down(i, c);
    }
  }

  void layer_step(std::size_t layer, Matrix& x, KVCache& cache, const PositionEncoderSpec& encoder,
                  std::vector<Vector>* capture) const {
    const Matrix normed = normalize_rows(x, weights_.layers[layer].attn_norm);
    finish_layer(layer, x, project(layer, normed), cache, encoder, capture);
  }

  Vector logits_of(std::span<const double> last) const {
    const Vector h = rms_norm(last, weights_.final_norm.span(), kNormEps);
    if (!config_.tied_output) return vecmat(h.span(), weights_.output);
    Vector out(config_.vocab_size);
    for (std::size_t v = 0; v < config_.vocab_size; ++v) {
      out[v] = dot(h.span(), weights_.token_embedding.row(v));
    }
    return out;
  }

  ModelConfig config_;
  Weights weights_;
  Vector theta_;
};

}  // namespace mspoe
