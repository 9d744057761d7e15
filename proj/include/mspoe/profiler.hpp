// Copyright 2026 The mspoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "mspoe/error.hpp"
#include "mspoe/model.hpp"
#include "mspoe/numerics.hpp"
#include "mspoe/posenc.hpp"

namespace mspoe {

struct HeadScore {
  std::size_t layer = 0;
  std::size_t head = 0;
  double score = 0.0;

  friend bool operator==(const HeadScore&, const HeadScore&) = default;
};

using LayerScores = std::vector<std::vector<HeadScore>>;  // [layer][head]

struct ProfilerConfig {
  struct PositionAware {
    friend bool operator==(const PositionAware&, const PositionAware&) = default;
  };
  struct Random {
    std::uint64_t seed = 0;
    friend bool operator==(const Random&, const Random&) = default;
  };
  struct Sequential {
    friend bool operator==(const Sequential&, const Sequential&) = default;
  };
  struct Entropy {
    friend bool operator==(const Entropy&, const Entropy&) = default;
  };
  using Strategy = std::variant<PositionAware, Random, Sequential, Entropy>;

  double alpha = 3.0;
  Strategy strategy = PositionAware{};
  double r_min = 1.2;
  double r_max = 1.8;
  // Leading positions dropped (and the rest renormalised) before scoring.
  std::size_t exclude_first_k = 0;

  void validate() const {
    if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
    if (!(r_min > 0.0) || !(r_min <= r_max)) throw ConfigError("need 0 < r_min <= r_max");
  }

  std::string strategy_label() const {
    return std::visit(
        [](const auto& s) -> std::string {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, PositionAware>) return "aware";
          if constexpr (std::is_same_v<T, Random>) return "random:" + std::to_string(s.seed);
          if constexpr (std::is_same_v<T, Sequential>) return "sequential";
          if constexpr (std::is_same_v<T, Entropy>) return "entropy";
        },
        strategy);
  }

  nlohmann::json to_json() const {
    return {{"alpha", alpha},
            {"strategy", strategy_label()},
            {"r_min", r_min},
            {"r_max", r_max},
            {"exclude_first_k", exclude_first_k}};
  }

  friend bool operator==(const ProfilerConfig&, const ProfilerConfig&) = default;
};

/// Fraction of positions whose attention reaches alpha times the mean attention.
inline double position_awareness_score(std::span<const double> attention, double alpha) {
  if (attention.empty()) throw ValidationError("position-awareness score of an empty vector");
  require_distribution(attention);
  const auto l = static_cast<double>(attention.size());
  double total = 0.0;
  for (double a : attention) total += a;
  const double threshold = alpha * (total / l);
  std::size_t hits = 0;
  for (double a : attention) {
    if (a >= threshold) ++hits;
  }
  return static_cast<double>(hits) / l;
}

inline double position_awareness_score(const Vector& attention, double alpha) {
  return position_awareness_score(attention.span(), alpha);
}

/// Same score using the simplification mean(A) = 1/l for a normalised A.
inline double position_awareness_score_normalized(std::span<const double> attention,
                                                  double alpha) {
  if (attention.empty()) throw ValidationError("position-awareness score of an empty vector");
  require_distribution(attention);
  const auto l = static_cast<double>(attention.size());
  const double threshold = alpha / l;
  const auto hits = std::count_if(attention.begin(), attention.end(),
                                  [&](double a) { return a >= threshold; });
  return static_cast<double>(hits) / l;
}

namespace detail {

inline Vector drop_leading(const Vector& row, std::size_t k) {
  if (k == 0) return row;
  if (k >= row.size()) {
    throw ValidationError("exclude_first_k removes the whole attention row");
  }
  Vector out(std::vector<double>(row.begin() + static_cast<std::ptrdiff_t>(k), row.end()));
  double total = 0.0;
  for (double x : out) total += x;
  if (!(total > 0.0)) throw ValidationError("no attention mass left after exclude_first_k");
  for (double& x : out) x /= total;
  return out;
}

}  // namespace detail

/// Scores every head of every layer under the configured strategy. Random and
/// Sequential scores only define an ordering.
inline LayerScores score_snapshot(const AttentionSnapshot& snap, const ProfilerConfig& cfg) {
  cfg.validate();
  if (snap.rows.empty()) throw CoverageError("snapshot holds no layers");
  const std::size_t n_heads = snap.rows.front().size();
  std::mt19937_64 rng(std::holds_alternative<ProfilerConfig::Random>(cfg.strategy)
                          ? std::get<ProfilerConfig::Random>(cfg.strategy).seed
                          : 0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  LayerScores out(snap.rows.size());
  for (std::size_t l = 0; l < snap.rows.size(); ++l) {
    if (snap.rows[l].size() != n_heads) {
      throw CoverageError("snapshot layer " + std::to_string(l) + " has " +
                          std::to_string(snap.rows[l].size()) + " heads, expected " +
                          std::to_string(n_heads));
    }
    for (std::size_t h = 0; h < n_heads; ++h) {
      const Vector& row = snap.row(l, h);
      if (row.size() != snap.context_len) {
        throw CoverageError("snapshot row for layer " + std::to_string(l) + ", head " +
                            std::to_string(h) + " does not span the context");
      }
      const Vector a = detail::drop_leading(row, cfg.exclude_first_k);
      const double score = std::visit(
          [&](const auto& s) -> double {
            using T = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<T, ProfilerConfig::PositionAware>) {
              return position_awareness_score(a, cfg.alpha);
            } else if constexpr (std::is_same_v<T, ProfilerConfig::Random>) {
              return unit(rng);
            } else if constexpr (std::is_same_v<T, ProfilerConfig::Sequential>) {
              return static_cast<double>(n_heads - h);
            } else {
              return entropy(a);
            }
          },
          cfg.strategy);
      out[l].push_back(HeadScore{l, h, score});
    }
  }
  return out;
}

/// Per layer, heads sorted by descending score (ties: ascending head index)
/// take the linear schedule in order, so the top-scoring head gets r_min.
inline RatioAssignment assign_ratios(const LayerScores& scores, const ProfilerConfig& cfg) {
  cfg.validate();
  if (scores.empty()) throw CoverageError("no layer scores to assign");
  const std::size_t n_heads = scores.front().size();
  const Vector schedule = linear_ratio_schedule(n_heads, cfg.r_min, cfg.r_max);
  std::vector<std::vector<double>> ratios;
  for (std::size_t l = 0; l < scores.size(); ++l) {
    const auto& layer = scores[l];
    if (layer.size() != n_heads) {
      throw CoverageError("layer " + std::to_string(l) + " scores " +
                          std::to_string(layer.size()) + " heads, expected " +
                          std::to_string(n_heads));
    }
    std::vector<double> by_head(n_heads, 0.0);
    std::vector<bool> seen(n_heads, false);
    for (const auto& s : layer) {
      if (s.head >= n_heads || seen[s.head]) {
        throw CoverageError("layer " + std::to_string(l) + " scores do not cover each head once");
      }
      seen[s.head] = true;
      by_head[s.head] = s.score;
    }
    std::vector<std::size_t> order(n_heads);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return by_head[a] > by_head[b]; });
    std::vector<double> row(n_heads);
    for (std::size_t rank = 0; rank < n_heads; ++rank) row[order[rank]] = schedule[rank];
    ratios.push_back(std::move(row));
  }
  return RatioAssignment(std::move(ratios));
}

inline nlohmann::json scores_to_json(const LayerScores& scores) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& layer : scores) {
    for (const auto& s : layer) {
      out.push_back({{"layer", s.layer}, {"head", s.head}, {"score", s.score}});
    }
  }
  return out;
}

}  // namespace mspoe
