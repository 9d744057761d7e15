// Copyright 2026 The mspoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mspoe/model.hpp"
#include "mspoe/posenc.hpp"
#include "mspoe/profiler.hpp"

namespace mspoe {

enum class ScoringMode { SeparatePass, InPlacePerLayer };

inline std::string to_string(ScoringMode m) {
  return m == ScoringMode::SeparatePass ? "separate" : "inplace";
}

struct PipelineConfig {
  ProfilerConfig profiler;
  ScoringMode scoring_mode = ScoringMode::SeparatePass;
  PositionEncoderSpec encoder_baseline = PositionEncoderSpec::standard();
  // Replaces the scored assignment when set; the scoring pass still runs.
  std::optional<RatioAssignment> override_assignment;

  nlohmann::json to_json() const {
    nlohmann::json j{{"profiler", profiler.to_json()},
                     {"scoring_mode", to_string(scoring_mode)},
                     {"encoder_baseline", encoder_baseline.label()}};
    if (override_assignment) j["override_assignment"] = override_assignment->to_json();
    return j;
  }
};

struct StageTiming {
  double scoring_ms = 0.0;
  double assignment_ms = 0.0;
  double prefill_ms = 0.0;
  double decode_ms = 0.0;

  nlohmann::json to_json() const {
    return {{"scoring_ms", scoring_ms},
            {"assignment_ms", assignment_ms},
            {"prefill_ms", prefill_ms},
            {"decode_ms", decode_ms}};
  }
};

struct GenerationResult {
  std::vector<TokenId> output_tokens;
  RatioAssignment ratio_assignment;  // the one used while decoding
  std::optional<AttentionSnapshot> snapshot;
  LayerScores scores;
  StageTiming timing;
};

namespace detail {

class Stopwatch {
 public:
  double lap_ms() {
    const auto now = std::chrono::steady_clock::now();
    const double ms = std::chrono::duration<double, std::milli>(now - last_).count();
    last_ = now;
    return ms;
  }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

inline void require_room(const Model& model, std::size_t prompt_len, std::size_t max_new) {
  if (prompt_len + max_new > model.config().max_seq_len) {
    throw ValidationError("prompt of " + std::to_string(prompt_len) + " tokens plus " +
                          std::to_string(max_new) + " new tokens exceeds max_seq_len " +
                          std::to_string(model.config().max_seq_len));
  }
}

}  // namespace detail

/// Scores heads on a baseline prefill, installs per-head ratios and decodes
/// greedily with those ratios frozen.
inline GenerationResult run_mspoe(const Model& model, std::span<const TokenId> prompt,
                                  const PipelineConfig& cfg, std::size_t max_new) {
  detail::require_room(model, prompt.size(), max_new);
  cfg.profiler.validate();
  GenerationResult result;
  detail::Stopwatch clock;

  PrefillResult state;
  if (cfg.scoring_mode == ScoringMode::SeparatePass) {
    PrefillResult scoring = model.forward_prefill(prompt, cfg.encoder_baseline, true);
    result.timing.scoring_ms = clock.lap_ms();
    result.scores = score_snapshot(*scoring.snapshot, cfg.profiler);
    result.ratio_assignment = cfg.override_assignment ? *cfg.override_assignment
                                                      : assign_ratios(result.scores, cfg.profiler);
    result.ratio_assignment.require_covers(model.config().n_layers, model.config().n_heads);
    result.snapshot = std::move(scoring.snapshot);
    result.timing.assignment_ms = clock.lap_ms();
    state = model.forward_prefill(
        prompt, PositionEncoderSpec::multi_scale(result.ratio_assignment), false);
    result.timing.prefill_ms = clock.lap_ms();
  } else {
    const std::size_t n_layers = model.config().n_layers;
    result.scores.resize(n_layers);
    LayerRatioHook hook = [&](std::size_t layer, const std::vector<Vector>& rows) {
      AttentionSnapshot one;
      one.context_len = prompt.size();
      one.rows = {rows};
      auto scored = score_snapshot(one, cfg.profiler);
      for (auto& s : scored.front()) s.layer = layer;
      result.scores[layer] = scored.front();
      if (cfg.override_assignment) return cfg.override_assignment->layer(layer);
      return assign_ratios(scored, cfg.profiler).layer(0);
    };
    auto [prefill, assignment] = model.forward_prefill_in_place(prompt, cfg.encoder_baseline, hook);
    result.timing.scoring_ms = clock.lap_ms();
    result.ratio_assignment = std::move(assignment);
    result.snapshot = std::move(prefill.snapshot);
    prefill.snapshot.reset();
    state = std::move(prefill);
  }

  const auto encoder = PositionEncoderSpec::multi_scale(result.ratio_assignment);
  result.output_tokens = model.generate_from(state, encoder, max_new);
  result.timing.decode_ms = clock.lap_ms();
  return result;
}

/// One prefill and greedy decode under a fixed encoder.
inline GenerationResult run_baseline(const Model& model, std::span<const TokenId> prompt,
                                     const PositionEncoderSpec& encoder, std::size_t max_new) {
  detail::require_room(model, prompt.size(), max_new);
  GenerationResult result;
  detail::Stopwatch clock;
  PrefillResult state = model.forward_prefill(prompt, encoder, false);
  result.timing.prefill_ms = clock.lap_ms();
  if (const auto* ms = std::get_if<PositionEncoderSpec::MultiScale>(&encoder.kind)) {
    result.ratio_assignment = ms->assignment;
  }
  result.output_tokens = model.generate_from(state, encoder, max_new);
  result.timing.decode_ms = clock.lap_ms();
  return result;
}

}  // namespace mspoe
