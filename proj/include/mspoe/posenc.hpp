// Copyright 2026 The mspoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "mspoe/error.hpp"
#include "mspoe/numerics.hpp"

namespace mspoe {

struct RopeParams {
  std::size_t head_dim = 64;
  double base = 10000.0;

  void validate() const {
    if (head_dim == 0 || head_dim % 2 != 0) {
      throw ConfigError("rope head_dim must be even and positive, got " + std::to_string(head_dim));
    }
    if (!(base > 0.0) || !std::isfinite(base)) throw ConfigError("rope base must be positive");
  }

  friend bool operator==(const RopeParams&, const RopeParams&) = default;
};

/// Per-plane angular frequencies base^(-2k/head_dim), k = 0 .. head_dim/2 - 1.
inline Vector theta_schedule(const RopeParams& params) {
  params.validate();
  const std::size_t planes = params.head_dim / 2;
  Vector theta(planes);
  for (std::size_t k = 0; k < planes; ++k) {
    theta[k] = std::pow(params.base, -2.0 * static_cast<double>(k) /
                                         static_cast<double>(params.head_dim));
  }
  return theta;
}

/// Rotates consecutive pairs (x[2k], x[2k+1]) by position * theta[k].
inline void rotate_into(std::span<const double> x, double position, std::span<const double> theta,
                        std::span<double> out) {
  if (x.size() != 2 * theta.size() || out.size() != x.size()) {
    throw ShapeError("rotate: vector length " + std::to_string(x.size()) + " vs head_dim " +
                     std::to_string(2 * theta.size()));
  }
  for (std::size_t k = 0; k < theta.size(); ++k) {
    const double angle = position * theta[k];
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double a = x[2 * k];
    const double b = x[2 * k + 1];
    out[2 * k] = a * c - b * s;
    out[2 * k + 1] = a * s + b * c;
  }
}

inline Vector rotate(std::span<const double> x, double position, const RopeParams& params) {
  const Vector theta = theta_schedule(params);
  Vector out(x.size());
  rotate_into(x, position, theta.span(), out.span());
  return out;
}

inline Vector rotate(const Vector& x, double position, const RopeParams& params) {
  return rotate(x.span(), position, params);
}

/// Unscaled rotary inner product <R(q_pos) q, R(k_pos) k>.
inline double attention_score(const Vector& q, const Vector& k, double q_pos, double k_pos,
                              const RopeParams& params) {
  if (q.size() != params.head_dim || k.size() != params.head_dim) {
    throw ShapeError("attention_score: q/k length must equal head_dim");
  }
  return dot(rotate(q, q_pos, params).span(), rotate(k, k_pos, params).span());
}

/// r_i = r_min + i (r_max - r_min) / (n_heads - 1) for i = 0 .. n_heads - 1.
/// A single head gets r_min.
inline Vector linear_ratio_schedule(std::size_t n_heads, double r_min = 1.2, double r_max = 1.8) {
  if (n_heads == 0) throw ConfigError("linear_ratio_schedule: n_heads must be positive");
  if (!(r_min > 0.0) || !(r_min <= r_max) || !std::isfinite(r_max)) {
    throw ConfigError("linear_ratio_schedule: need 0 < r_min <= r_max");
  }
  Vector out(n_heads, r_min);
  if (n_heads == 1 || r_min == r_max) return out;
  const double step = (r_max - r_min) / static_cast<double>(n_heads - 1);
  for (std::size_t i = 1; i + 1 < n_heads; ++i) out[i] = r_min + static_cast<double>(i) * step;
  out[n_heads - 1] = r_max;
  return out;
}

/// Per-layer, per-head positional scaling ratios.
class RatioAssignment {
 public:
  RatioAssignment() = default;

  RatioAssignment(std::size_t n_layers, std::size_t n_heads, double fill = 1.0)
      : n_layers_(n_layers), n_heads_(n_heads), ratios_(n_layers, std::vector<double>(n_heads, fill)) {
    validate();
  }

  explicit RatioAssignment(std::vector<std::vector<double>> ratios) : ratios_(std::move(ratios)) {
    n_layers_ = ratios_.size();
    n_heads_ = ratios_.empty() ? 0 : ratios_.front().size();
    validate();
  }

  std::size_t n_layers() const noexcept { return n_layers_; }
  std::size_t n_heads() const noexcept { return n_heads_; }

  double ratio(std::size_t layer, std::size_t head) const {
    if (layer >= n_layers_ || head >= n_heads_) {
      throw CoverageError("ratio assignment has no entry for layer " + std::to_string(layer) +
                          ", head " + std::to_string(head));
    }
    return ratios_[layer][head];
  }

  const std::vector<double>& layer(std::size_t l) const {
    if (l >= n_layers_) throw CoverageError("ratio assignment has no layer " + std::to_string(l));
    return ratios_[l];
  }

  void set_layer(std::size_t l, std::vector<double> ratios) {
    if (l >= n_layers_) throw CoverageError("ratio assignment has no layer " + std::to_string(l));
    if (ratios.size() != n_heads_) throw ShapeError("set_layer: wrong head count");
    for (double r : ratios) {
      if (!(r > 0.0) || !std::isfinite(r)) throw ConfigError("scaling ratios must be positive");
    }
    ratios_[l] = std::move(ratios);
  }

  const std::vector<std::vector<double>>& ratios() const noexcept { return ratios_; }

  /// Throws CoverageError unless this assignment spans exactly n_layers x n_heads.
  void require_covers(std::size_t n_layers, std::size_t n_heads) const {
    if (n_layers_ != n_layers || n_heads_ != n_heads) {
      throw CoverageError("ratio assignment is " + std::to_string(n_layers_) + "x" +
                          std::to_string(n_heads_) + ", model is " + std::to_string(n_layers) +
                          "x" + std::to_string(n_heads));
    }
  }

  nlohmann::json to_json() const {
    return {{"n_layers", n_layers_}, {"n_heads", n_heads_}, {"ratios", ratios_}};
  }

  static RatioAssignment from_json(const nlohmann::json& j) {
    RatioAssignment a(j.at("ratios").get<std::vector<std::vector<double>>>());
    if (a.n_layers() != j.at("n_layers").get<std::size_t>() ||
        a.n_heads() != j.at("n_heads").get<std::size_t>()) {
      throw ShapeError("ratio assignment JSON dimensions disagree with its ratios array");
    }
    return a;
  }

  friend bool operator==(const RatioAssignment&, const RatioAssignment&) = default;

 private:
  void validate() const {
    for (const auto& row : ratios_) {
      if (row.size() != n_heads_) throw ShapeError("ratio assignment rows must share a head count");
      for (double r : row) {
        if (!(r > 0.0) || !std::isfinite(r)) throw ConfigError("scaling ratios must be positive");
      }
    }
  }

  std::size_t n_layers_ = 0;
  std::size_t n_heads_ = 0;
  std::vector<std::vector<double>> ratios_;
};

/// How integer token positions become rotary positions.
struct PositionEncoderSpec {
  struct Standard {
    friend bool operator==(const Standard&, const Standard&) = default;
  };
  /// Every position divided by one global ratio (positional interpolation).
  struct Uniform {
    double ratio = 1.0;
    friend bool operator==(const Uniform&, const Uniform&) = default;
  };
  /// Neighbours within `window` keep their true distance; farther keys are
  /// floored into groups of `group` (Self-Extend style).
  struct Grouped {
    std::size_t group = 2;
    std::size_t window = 4;
    friend bool operator==(const Grouped&, const Grouped&) = default;
  };
  /// Per-(layer, head) ratio.
  struct MultiScale {
    RatioAssignment assignment;
    friend bool operator==(const MultiScale&, const MultiScale&) = default;
  };

  std::variant<Standard, Uniform, Grouped, MultiScale> kind;

  static PositionEncoderSpec standard() { return {Standard{}}; }
  static PositionEncoderSpec uniform(double ratio) {
    if (!(ratio > 0.0) || !std::isfinite(ratio)) throw ConfigError("uniform ratio must be > 0");
    return {Uniform{ratio}};
  }
  static PositionEncoderSpec grouped(std::size_t group, std::size_t window) {
    if (group < 1) throw ConfigError("group size must be >= 1");
    return {Grouped{group, window}};
  }
  static PositionEncoderSpec multi_scale(RatioAssignment assignment) {
    return {MultiScale{std::move(assignment)}};
  }

  /// True when the effective key position does not depend on the query position.
  bool query_independent() const { return !std::holds_alternative<Grouped>(kind); }

  std::string label() const {
    std::ostringstream os;
    if (std::holds_alternative<Standard>(kind)) {
      os << "rope";
    } else if (const auto* u = std::get_if<Uniform>(&kind)) {
      os << "pi:" << u->ratio;
    } else if (const auto* g = std::get_if<Grouped>(&kind)) {
      os << "self-extend:" << g->group << "," << g->window;
    } else {
      os << "mspoe";
    }
    return os.str();
  }

  friend bool operator==(const PositionEncoderSpec&, const PositionEncoderSpec&) = default;
};

struct EffectivePositions {
  double query = 0.0;
  double key = 0.0;
};

inline EffectivePositions map_position(const PositionEncoderSpec& spec, std::size_t layer,
                                       std::size_t head, std::int64_t query_pos,
                                       std::int64_t key_pos) {
  if (key_pos < 0 || key_pos > query_pos) {
    throw ValidationError("map_position: need 0 <= key_pos <= query_pos (got " +
                          std::to_string(key_pos) + ", " + std::to_string(query_pos) + ")");
  }
  const auto q = static_cast<double>(query_pos);
  const auto k = static_cast<double>(key_pos);
  return std::visit(
      [&](const auto& s) -> EffectivePositions {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, PositionEncoderSpec::Standard>) {
          return {q, k};
        } else if constexpr (std::is_same_v<T, PositionEncoderSpec::Uniform>) {
          return {q / s.ratio, k / s.ratio};
        } else if constexpr (std::is_same_v<T, PositionEncoderSpec::Grouped>) {
          const auto d = query_pos - key_pos;
          const auto w = static_cast<std::int64_t>(s.window);
          if (d <= w) return {q, k};
          const auto g = static_cast<std::int64_t>(s.group);
          const std::int64_t remapped = d / g + w - w / g;
          return {q, static_cast<double>(query_pos - remapped)};
        } else {
          const double r = s.assignment.ratio(layer, head);
          return {q / r, k / r};
        }
      },
      spec.kind);
}

}  // namespace mspoe
