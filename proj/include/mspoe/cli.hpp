// Copyright 2026 The mspoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "mspoe/error.hpp"
#include "mspoe/harness.hpp"
#include "mspoe/induction.hpp"
#include "mspoe/model.hpp"
#include "mspoe/pipeline.hpp"
#include "mspoe/profiler.hpp"
#include "mspoe/weights_io.hpp"

namespace mspoe::cli {

class UsageError : public Error {
 public:
  using Error::Error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

inline constexpr const char* kValidEncoders = "rope, pi, pi:R, self-extend:G,W, mspoe";
inline constexpr const char* kValidStrategies = "aware, random:SEED, sequential, entropy";
inline const std::vector<double> kDefaultSweepRatios{0.5, 1.0, 1.5, 2.0, 2.5};

struct ScoringFlags {
  double alpha = 3.0;
  double r_min = 1.2;
  double r_max = 1.8;
  std::string strategy = "aware";
  std::string scoring_mode = "separate";
  std::size_t exclude_first_k = 0;
};

struct TaskFlags {
  std::string task = "kv";
  std::size_t items = 0;  // 0: 8 pairs for kv, 10 documents for mdqa
  std::size_t doc_len = 4;
  std::uint64_t seed = 0;
};

inline double parse_double(const std::string& s, const std::string& what) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw UsageError("invalid " + what + ": '" + s + "'");
  }
  return v;
}

inline std::uint64_t parse_u64(const std::string& s, const std::string& what) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw UsageError("invalid " + what + ": '" + s + "'");
  }
  return v;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  return out;
}

inline ProfilerConfig::Strategy parse_strategy(const std::string& s) {
  if (s == "aware") return ProfilerConfig::PositionAware{};
  if (s == "sequential") return ProfilerConfig::Sequential{};
  if (s == "entropy") return ProfilerConfig::Entropy{};
  if (s.rfind("random:", 0) == 0) return ProfilerConfig::Random{parse_u64(s.substr(7), "seed")};
  throw UsageError("unknown strategy '" + s + "'; valid strategies: " + kValidStrategies);
}

inline ScoringMode parse_scoring_mode(const std::string& s) {
  if (s == "separate") return ScoringMode::SeparatePass;
  if (s == "inplace") return ScoringMode::InPlacePerLayer;
  throw UsageError("unknown scoring mode '" + s + "'; valid modes: separate, inplace");
}

inline PipelineConfig make_pipeline(const ScoringFlags& f) {
  PipelineConfig cfg;
  cfg.profiler.alpha = f.alpha;
  cfg.profiler.r_min = f.r_min;
  cfg.profiler.r_max = f.r_max;
  cfg.profiler.strategy = parse_strategy(f.strategy);
  cfg.profiler.exclude_first_k = f.exclude_first_k;
  cfg.scoring_mode = parse_scoring_mode(f.scoring_mode);
  try {
    cfg.profiler.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  return cfg;
}

/// "pi" alone interpolates by the midpoint of [r_min, r_max].
inline EvalMethod parse_encoder(const std::string& s, const ScoringFlags& f) {
  if (s == "rope") return PositionEncoderSpec::standard();
  if (s == "mspoe") return make_pipeline(f);
  if (s == "pi") return PositionEncoderSpec::uniform((f.r_min + f.r_max) / 2.0);
  if (s.rfind("pi:", 0) == 0) {
    const double r = parse_double(s.substr(3), "interpolation ratio");
    if (!(r > 0.0)) throw UsageError("interpolation ratio must be positive");
    return PositionEncoderSpec::uniform(r);
  }
  if (s.rfind("self-extend:", 0) == 0) {
    const auto parts = split(s.substr(12), ',');
    if (parts.size() != 2) throw UsageError("self-extend expects G,W, got '" + s + "'");
    const auto g = parse_u64(parts[0], "group size");
    const auto w = parse_u64(parts[1], "window");
    if (g == 0) throw UsageError("self-extend group size must be positive");
    return PositionEncoderSpec::grouped(static_cast<std::int64_t>(g), static_cast<std::int64_t>(w));
  }
  throw UsageError("unknown encoder '" + s + "'; valid encoders: " + kValidEncoders);
}

inline std::vector<double> parse_ratio_list(const std::string& s) {
  std::vector<double> out;
  for (const auto& part : split(s, ',')) {
    if (part.empty()) continue;
    const double r = parse_double(part, "ratio");
    if (!(r > 0.0)) throw UsageError("sweep ratios must be positive");
    out.push_back(r);
  }
  if (out.empty()) throw UsageError("ratio list is empty");
  return out;
}

inline std::vector<TokenId> parse_tokens(const std::string& s) {
  std::vector<TokenId> out;
  for (const auto& part : split(s, ',')) {
    const auto v = parse_u64(part, "token id");
    if (v > 0xffffffffu) throw UsageError("token id out of range: " + part);
    out.push_back(static_cast<TokenId>(v));
  }
  if (out.empty()) throw UsageError("prompt is empty");
  return out;
}

/// "induction" names the built-in fixture; anything else is a weight file.
inline std::pair<ModelConfig, Weights> load_model(const std::string& spec) {
  if (spec == "induction") return build_induction_model();
  return load_weights(spec);
}

inline TaskFamily make_family(const TaskFlags& f) {
  if (f.task == "kv") return TaskFamily::kv(f.items == 0 ? 8 : f.items, f.seed);
  if (f.task == "mdqa") return TaskFamily::mdqa(f.items == 0 ? 10 : f.items, f.doc_len, f.seed);
  throw UsageError("unknown task '" + f.task + "'; valid tasks: kv, mdqa");
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw Error("failed writing " + path.string());
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  write_text(path, j.dump(2) + "\n");
}

inline nlohmann::json scoring_json(const ScoringFlags& f) {
  return {{"alpha", f.alpha},
          {"rmin", f.r_min},
          {"rmax", f.r_max},
          {"strategy", f.strategy},
          {"scoring_mode", f.scoring_mode},
          {"exclude_first_k", f.exclude_first_k}};
}

inline nlohmann::json task_json(const TaskFamily& fam) { return fam.to_json(); }

inline std::string tokens_to_string(const std::vector<TokenId>& t) {
  std::string s;
  for (std::size_t i = 0; i < t.size(); ++i) s += (i ? "," : "") + std::to_string(t[i]);
  return s;
}

inline std::string profile_csv(const LayerScores& scores, const RatioAssignment& ratios) {
  std::ostringstream os;
  os << "layer,head,score,ratio\n";
  for (const auto& layer : scores) {
    for (const auto& s : layer) {
      os << s.layer << "," << s.head << "," << format_number(s.score) << ","
         << format_number(ratios.ratio(s.layer, s.head)) << "\n";
    }
  }
  return os.str();
}

inline void print_summary(std::ostream& out, const std::vector<EvalReport>& reports) {
  out << std::left << std::setw(24) << "encoder" << std::right << std::setw(10) << "average"
      << std::setw(10) << "gap" << "  per-position\n";
  for (const auto& r : reports) {
    out << std::left << std::setw(24) << r.encoder_label << std::right << std::fixed
        << std::setprecision(3) << std::setw(10) << r.average << std::setw(10) << r.gap << " ";
    for (double a : r.per_position_accuracy) out << " " << a;
    out << "\n" << std::defaultfloat;
  }
}

namespace detail {

struct PromptFlags {
  std::string prompt;
  std::size_t position = 0;
  std::size_t sample = 0;
};

inline void add_scoring_flags(CLI::App* app, ScoringFlags& f) {
  app->add_option("--alpha", f.alpha, "attention threshold multiple of the mean")->capture_default_str();
  app->add_option("--rmin", f.r_min, "smallest per-head ratio")->capture_default_str();
  app->add_option("--rmax", f.r_max, "largest per-head ratio")->capture_default_str();
  app->add_option("--strategy", f.strategy, kValidStrategies)->capture_default_str();
  app->add_option("--scoring-mode", f.scoring_mode, "separate or inplace")->capture_default_str();
  app->add_option("--exclude-first-k", f.exclude_first_k,
                  "leading positions dropped before scoring")
      ->capture_default_str();
}

inline void add_task_flags(CLI::App* app, TaskFlags& f) {
  app->add_option("--task", f.task, "kv or mdqa")->capture_default_str();
  app->add_option("--items", f.items, "pairs (kv) or documents (mdqa); 0 picks 8 or 10")
      ->capture_default_str();
  app->add_option("--doc-len", f.doc_len, "tokens per mdqa document")->capture_default_str();
  app->add_option("--task-seed", f.seed, "task generator seed")->capture_default_str();
}

inline void add_prompt_flags(CLI::App* app, PromptFlags& f) {
  app->add_option("--prompt", f.prompt, "comma-separated token ids; overrides the task");
  app->add_option("--position", f.position, "relevant-item position of the generated task")
      ->capture_default_str();
  app->add_option("--sample", f.sample, "sample index of the generated task")->capture_default_str();
}

struct Prompt {
  std::vector<TokenId> tokens;
  std::optional<RetrievalTask> task;
};

inline Prompt resolve_prompt(const PromptFlags& pf, const TaskFlags& tf) {
  if (!pf.prompt.empty()) return {parse_tokens(pf.prompt), std::nullopt};
  const TaskFamily fam = make_family(tf);
  if (pf.position >= fam.n_items) throw UsageError("--position out of range for the task");
  RetrievalTask t = fam.generate(pf.position, pf.sample);
  return {t.prompt_tokens, t};
}

inline nlohmann::json prompt_json(const PromptFlags& pf, const TaskFlags& tf) {
  if (!pf.prompt.empty()) return {{"prompt", pf.prompt}};
  return {{"task", make_family(tf).to_json()}, {"position", pf.position}, {"sample", pf.sample}};
}

}  // namespace detail

/// Parses and executes one invocation. args excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-scale positional encoding inference engine", "mspoe"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  std::string model_spec = "induction";
  ScoringFlags sf;
  TaskFlags tf;
  detail::PromptFlags pf;
  std::string encoder = "mspoe";
  std::vector<std::string> encoders{"rope"};
  std::size_t max_new = 1;
  std::size_t samples = 100;
  std::string dump_snapshot, dump_ratios, out_path, out_prefix, ratios_arg;
  bool ratios_given = false;

  auto* run_cmd = app.add_subcommand("run", "score heads, install ratios and decode one prompt");
  run_cmd->add_option("--model", model_spec, "weight file or 'induction'")->capture_default_str();
  run_cmd->add_option("--encoder", encoder, kValidEncoders)->capture_default_str();
  run_cmd->add_option("--max-new", max_new, "tokens to generate")->capture_default_str();
  run_cmd->add_option("--dump-snapshot", dump_snapshot, "write the scoring snapshot as JSON");
  run_cmd->add_option("--dump-ratios", dump_ratios, "write the ratio assignment as JSON");
  run_cmd->add_option("--out", out_path, "write the run record as JSON");
  detail::add_scoring_flags(run_cmd, sf);
  detail::add_task_flags(run_cmd, tf);
  detail::add_prompt_flags(run_cmd, pf);

  auto* profile_cmd = app.add_subcommand("profile", "dump head scores and ratios for one prompt");
  profile_cmd->add_option("--model", model_spec, "weight file or 'induction'")->capture_default_str();
  profile_cmd->add_option("--out-prefix", out_prefix, "writes PREFIX.json and PREFIX.csv")
      ->required();
  detail::add_scoring_flags(profile_cmd, sf);
  detail::add_task_flags(profile_cmd, tf);
  detail::add_prompt_flags(profile_cmd, pf);

  auto* eval_cmd = app.add_subcommand("eval", "per-position retrieval accuracy");
  eval_cmd->add_option("--model", model_spec, "weight file or 'induction'")->capture_default_str();
  eval_cmd->add_option("--encoder", encoders, "repeatable; one of " + std::string(kValidEncoders))
      ->capture_default_str();
  eval_cmd->add_option("--samples", samples, "samples per position")->capture_default_str();
  eval_cmd->add_option("--out-prefix", out_prefix, "writes PREFIX.json and PREFIX.csv")->required();
  detail::add_scoring_flags(eval_cmd, sf);
  detail::add_task_flags(eval_cmd, tf);

  auto* sweep_cmd = app.add_subcommand("sweep", "accuracy curves over uniform ratios");
  sweep_cmd->add_option("--model", model_spec, "weight file or 'induction'")->capture_default_str();
  sweep_cmd->add_option("--ratios", ratios_arg, "comma-separated, default 0.5,1,1.5,2,2.5")
      ->each([&](const std::string&) { ratios_given = true; });
  sweep_cmd->add_option("--samples", samples, "samples per position")->capture_default_str();
  sweep_cmd->add_option("--out-prefix", out_prefix, "writes PREFIX.json and PREFIX.csv")->required();
  detail::add_task_flags(sweep_cmd, tf);

  std::string kind = "induction";
  std::uint64_t seed = kInductionSeed;
  bool seed_given = false;
  ModelConfig rc;
  double scale = 0.3;
  bool untied = false;
  auto* gen_cmd = app.add_subcommand("gen-weights", "write a weight file");
  gen_cmd->add_option("--kind", kind, "induction or random")->capture_default_str();
  gen_cmd->add_option("--seed", seed, "weight seed")->each([&](const std::string&) {
    seed_given = true;
  });
  gen_cmd->add_option("--out", out_path, "weight file path")->required();
  gen_cmd->add_option("--layers", rc.n_layers)->capture_default_str();
  gen_cmd->add_option("--heads", rc.n_heads)->capture_default_str();
  gen_cmd->add_option("--head-dim", rc.head_dim)->capture_default_str();
  gen_cmd->add_option("--mlp-dim", rc.mlp_dim)->capture_default_str();
  gen_cmd->add_option("--vocab", rc.vocab_size)->capture_default_str();
  gen_cmd->add_option("--max-seq-len", rc.max_seq_len)->capture_default_str();
  gen_cmd->add_option("--rope-base", rc.rope.base)->capture_default_str();
  gen_cmd->add_option("--scale", scale, "standard deviation of random weights")
      ->capture_default_str();
  gen_cmd->add_flag("--untied", untied, "separate output matrix");

  bool as_json = false;
  auto* inspect_cmd = app.add_subcommand("inspect", "print a model's config and tensor summary");
  inspect_cmd->add_option("--model", model_spec, "weight file or 'induction'")->capture_default_str();
  inspect_cmd->add_flag("--json", as_json, "machine-readable output");

  std::vector<std::string> argv_store{"mspoe"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  const nlohmann::json invocation{{"tool", "mspoe"}, {"args", args}};
  try {
    if (run_cmd->parsed()) {
      const EvalMethod method = parse_encoder(encoder, sf);
      const auto prompt = detail::resolve_prompt(pf, tf);
      const auto [cfg, w] = load_model(model_spec);
      const Model model(cfg, w);
      GenerationResult res = run_method(model, prompt.tokens, method, max_new);
      if (!dump_snapshot.empty()) {
        if (!res.snapshot) {
          const auto& enc = std::get<PositionEncoderSpec>(method);
          res.snapshot = model.forward_prefill(prompt.tokens, enc, true).snapshot;
        }
        write_json(dump_snapshot, res.snapshot->to_json());
      }
      if (!dump_ratios.empty()) {
        if (res.ratio_assignment.n_layers() == 0) {
          res.ratio_assignment = RatioAssignment(cfg.n_layers, cfg.n_heads, 1.0);
        }
        write_json(dump_ratios, res.ratio_assignment.to_json());
      }
      out << "output: " << tokens_to_string(res.output_tokens) << "\n";
      nlohmann::json record{{"invocation", invocation},
                            {"config",
                             {{"model", model_spec},
                              {"encoder", method_label(method)},
                              {"max_new", max_new},
                              {"scoring", scoring_json(sf)},
                              {"input", detail::prompt_json(pf, tf)}}},
                            {"output_tokens", res.output_tokens}};
      if (!res.scores.empty()) record["scores"] = scores_to_json(res.scores);
      if (res.ratio_assignment.n_layers() > 0) record["ratios"] = res.ratio_assignment.to_json();
      if (prompt.task) {
        const bool correct = res.output_tokens.size() >= prompt.task->expected_answer.size() &&
                             std::equal(prompt.task->expected_answer.begin(),
                                        prompt.task->expected_answer.end(),
                                        res.output_tokens.begin());
        out << "expected: " << tokens_to_string(prompt.task->expected_answer)
            << (correct ? "  (correct)" : "  (wrong)") << "\n";
        record["expected_answer"] = prompt.task->expected_answer;
        record["correct"] = correct;
      }
      out << "timing_ms: scoring " << res.timing.scoring_ms << ", prefill "
          << res.timing.prefill_ms << ", decode " << res.timing.decode_ms << "\n";
      if (!out_path.empty()) write_json(out_path, record);
      return kExitOk;
    }

    if (profile_cmd->parsed()) {
      const PipelineConfig pc = make_pipeline(sf);
      const auto prompt = detail::resolve_prompt(pf, tf);
      const auto [cfg, w] = load_model(model_spec);
      const Model model(cfg, w);
      const GenerationResult res = run_mspoe(model, prompt.tokens, pc, 0);
      const nlohmann::json record{{"invocation", invocation},
                                  {"config",
                                   {{"model", model_spec},
                                    {"scoring", scoring_json(sf)},
                                    {"input", detail::prompt_json(pf, tf)}}},
                                  {"scores", scores_to_json(res.scores)},
                                  {"ratios", res.ratio_assignment.to_json()}};
      write_json(out_prefix + ".json", record);
      write_text(out_prefix + ".csv", profile_csv(res.scores, res.ratio_assignment));
      out << "layer head score      ratio\n";
      for (const auto& layer : res.scores) {
        for (const auto& s : layer) {
          out << std::setw(5) << s.layer << std::setw(5) << s.head << " " << std::fixed
              << std::setprecision(6) << s.score << "  " << std::setprecision(3)
              << res.ratio_assignment.ratio(s.layer, s.head) << "\n"
              << std::defaultfloat;
        }
      }
      return kExitOk;
    }

    if (eval_cmd->parsed()) {
      std::vector<EvalMethod> methods;
      for (const auto& e : encoders) methods.push_back(parse_encoder(e, sf));
      if (samples == 0) throw UsageError("--samples must be at least 1");
      const TaskFamily fam = make_family(tf);
      const auto [cfg, w] = load_model(model_spec);
      const Model model(cfg, w);
      std::vector<EvalReport> reports;
      for (const auto& m : methods) {
        reports.push_back(evaluate(model, fam, m, samples, threads_from_env()));
      }
      nlohmann::json jr = nlohmann::json::array();
      for (const auto& r : reports) jr.push_back(r.to_json());
      const nlohmann::json record{{"invocation", invocation},
                                  {"config",
                                   {{"model", model_spec},
                                    {"encoders", encoders},
                                    {"samples", samples},
                                    {"scoring", scoring_json(sf)},
                                    {"task", fam.to_json()}}},
                                  {"reports", jr}};
      write_json(out_prefix + ".json", record);
      write_text(out_prefix + ".csv", reports_to_csv(reports));
      print_summary(out, reports);
      return kExitOk;
    }

    if (sweep_cmd->parsed()) {
      const std::vector<double> ratios =
          ratios_given ? parse_ratio_list(ratios_arg) : kDefaultSweepRatios;
      if (samples == 0) throw UsageError("--samples must be at least 1");
      const TaskFamily fam = make_family(tf);
      const auto [cfg, w] = load_model(model_spec);
      const Model model(cfg, w);
      const auto reports = ratio_sweep(model, fam, ratios, samples, threads_from_env());
      nlohmann::json jr = nlohmann::json::array();
      for (const auto& r : reports) jr.push_back(r.to_json());
      const nlohmann::json record{{"invocation", invocation},
                                  {"config",
                                   {{"model", model_spec},
                                    {"ratios", ratios},
                                    {"samples", samples},
                                    {"task", fam.to_json()}}},
                                  {"reports", jr}};
      write_json(out_prefix + ".json", record);
      write_text(out_prefix + ".csv", reports_to_csv(reports, true));
      print_summary(out, reports);
      return kExitOk;
    }

    if (gen_cmd->parsed()) {
      std::pair<ModelConfig, Weights> m;
      if (kind == "induction") {
        m = build_induction_model(seed);
      } else if (kind == "random") {
        rc.rope.head_dim = rc.head_dim;
        rc.tied_output = !untied;
        try {
          rc.validate();
        } catch (const ConfigError& e) {
          throw UsageError(e.what());
        }
        m = {rc, Weights::random(rc, seed_given ? seed : 0, scale)};
      } else {
        throw UsageError("unknown weight kind '" + kind + "'; valid kinds: induction, random");
      }
      save_weights(out_path, m.first, m.second);
      out << "wrote " << out_path << " and " << sidecar_path(out_path).string() << "\n";
      return kExitOk;
    }

    if (inspect_cmd->parsed()) {
      auto [cfg, w] = load_model(model_spec);
      nlohmann::json tensors = nlohmann::json::array();
      for (const auto& t : mspoe::detail::tensor_table(cfg, w)) {
        double lo = t.data.empty() ? 0.0 : t.data[0];
        double hi = lo;
        double sq = 0.0;
        for (double x : t.data) {
          lo = std::min(lo, x);
          hi = std::max(hi, x);
          sq += x * x;
        }
        const double rms = t.data.empty() ? 0.0 : std::sqrt(sq / static_cast<double>(t.data.size()));
        tensors.push_back({{"name", t.name}, {"shape", t.dims}, {"min", lo}, {"max", hi}, {"rms", rms}});
      }
      const nlohmann::json info{{"config", config_to_json(cfg)}, {"tensors", tensors}};
      if (as_json) {
        out << info.dump(2) << "\n";
      } else {
        out << "config " << info["config"].dump() << "\n";
        for (const auto& t : tensors) {
          out << std::left << std::setw(22) << t["name"].get<std::string>() << std::right
              << std::setw(14) << t["shape"].dump() << "  min " << t["min"].get<double>()
              << "  max " << t["max"].get<double>() << "  rms " << t["rms"].get<double>() << "\n";
        }
      }
      return kExitOk;
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace mspoe::cli
