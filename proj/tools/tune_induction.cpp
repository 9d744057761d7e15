// Copyright 2026 The mspoe Authors
// SPDX-License-Identifier: Apache-2.0

// Prints the retrieval curves of the constructed induction model under every
// encoder for a given set of parameter overrides (name=value arguments). Used
// to pick the frozen defaults of InductionParams.

#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>
#include <string>

#include "mspoe/harness.hpp"
#include "mspoe/induction.hpp"

using namespace mspoe;

namespace {

void print(const EvalReport& r) {
  std::printf("%-22s avg=%.3f gap=%.3f |", r.encoder_label.c_str(), r.average, r.gap);
  for (double a : r.per_position_accuracy) std::printf(" %.2f", a);
  std::printf("\n");
}

}  // namespace

int main(int argc, char** argv) {
  InductionParams p;
  std::size_t samples = 100;
  std::string task = "kv";
  std::size_t n_items = 8;
  std::map<std::string, std::function<void(double)>> setters{
      {"rope_base", [&](double v) { p.rope_base = v; }},
      {"identity_norm", [&](double v) { p.identity_norm = v; }},
      {"flag_norm", [&](double v) { p.flag_norm = v; }},
      {"const_norm", [&](double v) { p.const_norm = v; }},
      {"prev_head", [&](double v) { p.prev_head = static_cast<std::size_t>(v); }},
      {"prev_sink", [&](double v) { p.prev_sink = v; }},
      {"back2_head", [&](double v) { p.back2_head = static_cast<std::size_t>(v); }},
      {"back2_peak", [&](double v) { p.back2_peak = v; }},
      {"back2_sink", [&](double v) { p.back2_sink = v; }},
      {"prev_copy", [&](double v) { p.prev_copy = v; }},
      {"content_first_plane", [&](double v) { p.content_first_plane = static_cast<std::size_t>(v); }},
      {"content_query", [&](double v) { p.content_query = v; }},
      {"content_sink", [&](double v) { p.content_sink = v; }},
      {"content_copy", [&](double v) { p.content_copy = v; }},
      {"primacy_plane", [&](double v) { p.primacy_plane = static_cast<std::size_t>(v); }},
      {"primacy_gain", [&](double v) { p.primacy_gain = v; }},
      {"primacy_phase", [&](double v) { p.primacy_phase = v; }},
      {"recency_phase", [&](double v) { p.recency_phase = v; }},
      {"primacy_copy", [&](double v) { p.primacy_copy = v; }},
      {"recency_plane", [&](double v) { p.recency_plane = static_cast<std::size_t>(v); }},
      {"recency_gain", [&](double v) { p.recency_gain = v; }},
      {"recency_copy", [&](double v) { p.recency_copy = v; }},
      {"sink_gain", [&](double v) { p.sink_gain = v; }},
      {"value_bias", [&](double v) { p.value_bias = v; }},
      {"samples", [&](double v) { samples = static_cast<std::size_t>(v); }},
      {"n_items", [&](double v) { n_items = static_cast<std::size_t>(v); }},
      {"task", [&](double v) { task = v == 0 ? "kv" : "mdqa"; }},
  };
  for (int i = 1; i < argc; ++i) {
    std::string arg = argv[i];
    const auto eq = arg.find('=');
    if (eq == std::string::npos) {
      std::cerr << "expected name=value, got " << arg << "\n";
      return 2;
    }
    const std::string name = arg.substr(0, eq);
    const std::string value = arg.substr(eq + 1);
    if (name.rfind("pw", 0) == 0) {
      p.prev_plane_weights.at(std::stoul(name.substr(2))) = std::stod(value);
      continue;
    }
    if (name.rfind("bw", 0) == 0) {
      p.back2_plane_weights.at(std::stoul(name.substr(2))) = std::stod(value);
      continue;
    }
    if (name.rfind("cd", 0) == 0) {
      p.content_decay.at(std::stoul(name.substr(2))) = std::stod(value);
      continue;
    }
    if (name == "heads") {  // e.g. heads=0123 -> sink, primacy, recency, content
      p.sink_head = value[0] - '0';
      p.primacy_head = value[1] - '0';
      p.recency_head = value[2] - '0';
      p.content_head = value[3] - '0';
      continue;
    }
    auto it = setters.find(name);
    if (it == setters.end()) {
      std::cerr << "unknown parameter " << name << "\n";
      return 2;
    }
    it->second(std::stod(value));
  }

  auto [cfg, w] = build_induction_model(kInductionSeed, p);
  const Model model(cfg, w);
  const TaskFamily family = task == "kv" ? TaskFamily::kv(n_items, 7) : TaskFamily::mdqa(10, 4, 7);
  const std::size_t threads = threads_from_env();

  print(evaluate(model, family, PositionEncoderSpec::standard(), samples, threads));
  for (double r : {0.5, 1.2, 1.5, 1.8, 2.5}) {
    print(evaluate(model, family, PositionEncoderSpec::uniform(r), samples, threads));
  }
  print(evaluate(model, family, PositionEncoderSpec::grouped(2, 4), samples, threads));
  PipelineConfig aware;
  print(evaluate(model, family, aware, samples, threads));
  for (ProfilerConfig::Strategy s : {ProfilerConfig::Strategy{ProfilerConfig::Random{1}},
                                     ProfilerConfig::Strategy{ProfilerConfig::Random{2}},
                                     ProfilerConfig::Strategy{ProfilerConfig::Sequential{}},
                                     ProfilerConfig::Strategy{ProfilerConfig::Entropy{}}}) {
    PipelineConfig c;
    c.profiler.strategy = s;
    print(evaluate(model, family, c, samples, threads));
  }
  PipelineConfig inplace;
  inplace.scoring_mode = ScoringMode::InPlacePerLayer;
  print(evaluate(model, family, inplace, samples, threads));

  // Mean position-awareness score per head of the last layer, per position.
  std::printf("S_P (layer 1) per position, heads 0..3; ratios\n");
  for (std::size_t pos = 0; pos < family.n_items; ++pos) {
    std::vector<double> mean(cfg.n_heads, 0.0);
    std::size_t wins = 0;
    double bos = 0, vrel = 0, next = 0;
    const std::size_t n = 20;
    RatioAssignment last;
    for (std::size_t s = 0; s < n; ++s) {
      const auto t = family.generate(pos, s);
      const auto res = run_mspoe(model, t.prompt_tokens, PipelineConfig{}, 1);
      const auto& sc = res.scores.back();
      for (std::size_t h = 0; h < cfg.n_heads; ++h) mean[h] += sc[h].score / n;
      bool win = true;
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        if (h != p.content_head && !(sc[p.content_head].score > sc[h].score)) win = false;
      }
      wins += win;
      last = res.ratio_assignment;
      if (task == "kv") {
        const auto& row = res.snapshot->row(1, p.content_head);
        bos += row[0] / n;
        vrel += row[2 * pos + 2] / n;
        next += row[2 * pos + 3] / n;
      }
    }
    std::printf("pos %zu:", pos);
    for (double m : mean) std::printf(" %.4f", m);
    std::printf("  content-wins %zu/%zu  ratios", wins, n);
    for (double r : last.layer(1)) std::printf(" %.2f", r);
    std::printf(" | l0");
    for (double r : last.layer(0)) std::printf(" %.2f", r);
    std::printf(" | bos %.2f v %.2f next %.2f\n", bos, vrel, next);
  }
  return 0;
}
