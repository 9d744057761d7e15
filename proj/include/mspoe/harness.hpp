// Copyright 2026 The mspoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "mspoe/error.hpp"
#include "mspoe/model.hpp"
#include "mspoe/pipeline.hpp"
#include "mspoe/posenc.hpp"
#include "mspoe/profiler.hpp"

namespace mspoe {

/// Disjoint token-id ranges used by the synthetic tasks, half-open [begin, end).
struct VocabLayout {
  TokenId bos = 0;
  TokenId key_begin = 1, key_end = 25;        // keys and document markers
  TokenId value_begin = 25, value_end = 49;   // values and answers
  TokenId filler_begin = 49, filler_end = 64;

  std::size_t n_keys() const { return key_end - key_begin; }
  std::size_t n_values() const { return value_end - value_begin; }
  std::size_t n_fillers() const { return filler_end - filler_begin; }
  std::size_t vocab_size() const {
    return std::max({static_cast<std::size_t>(bos) + 1, static_cast<std::size_t>(key_end),
                     static_cast<std::size_t>(value_end), static_cast<std::size_t>(filler_end)});
  }

  bool is_key(TokenId t) const { return t >= key_begin && t < key_end; }
  bool is_value(TokenId t) const { return t >= value_begin && t < value_end; }
  bool is_filler(TokenId t) const { return t >= filler_begin && t < filler_end; }

  void validate() const {
    auto overlap = [](TokenId a0, TokenId a1, TokenId b0, TokenId b1) {
      return a0 < b1 && b0 < a1;
    };
    if (key_begin >= key_end || value_begin >= value_end || filler_begin >= filler_end) {
      throw ConfigError("vocab ranges must be non-empty");
    }
    if (overlap(key_begin, key_end, value_begin, value_end) ||
        overlap(key_begin, key_end, filler_begin, filler_end) ||
        overlap(value_begin, value_end, filler_begin, filler_end) || is_key(bos) ||
        is_value(bos) || is_filler(bos)) {
      throw ConfigError("vocab ranges must be disjoint");
    }
  }
};

enum class TaskKind { KvRetrieval, Mdqa };

inline std::string to_string(TaskKind k) { return k == TaskKind::KvRetrieval ? "kv" : "mdqa"; }

struct RetrievalTask {
  TaskKind kind = TaskKind::KvRetrieval;
  std::size_t n_items = 0;
  std::size_t item_len = 0;
  std::size_t relevant_index = 0;
  std::vector<TokenId> prompt_tokens;
  std::vector<TokenId> expected_answer;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::vector<TokenId> draw_distinct(std::mt19937_64& rng, TokenId begin, TokenId end,
                                          std::size_t n) {
  std::vector<TokenId> pool(end - begin);
  for (TokenId t = begin; t < end; ++t) pool[t - begin] = t;
  // Partial Fisher-Yates with an explicit modulo-free draw keeps this portable.
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(n);
  return pool;
}

// Slot `relevant` gets item 0; the other items keep their draw order.
template <typename Item>
std::vector<Item> place_relevant(std::vector<Item> items, std::size_t relevant) {
  std::vector<Item> out;
  out.reserve(items.size());
  std::size_t next = 1;
  for (std::size_t slot = 0; slot < items.size(); ++slot) {
    out.push_back(slot == relevant ? items[0] : items[next++]);
  }
  return out;
}

}  // namespace detail

/// BOS, then n_pairs (key, value) pairs, then the queried key; the answer is its value.
inline RetrievalTask gen_kv_task(std::size_t n_pairs, std::uint64_t seed, const VocabLayout& vocab,
                                 std::size_t relevant_index) {
  vocab.validate();
  if (n_pairs == 0) throw ConfigError("kv task needs at least one pair");
  if (relevant_index >= n_pairs) throw ConfigError("relevant_index out of range");
  if (vocab.n_keys() < n_pairs || vocab.n_values() < n_pairs) {
    throw ConfigError("vocab too small to draw " + std::to_string(n_pairs) +
                      " distinct keys and values");
  }
  std::mt19937_64 rng(seed);
  const auto keys = detail::draw_distinct(rng, vocab.key_begin, vocab.key_end, n_pairs);
  const auto values = detail::draw_distinct(rng, vocab.value_begin, vocab.value_end, n_pairs);
  std::vector<std::pair<TokenId, TokenId>> pairs;
  for (std::size_t i = 0; i < n_pairs; ++i) pairs.emplace_back(keys[i], values[i]);
  const auto slots = detail::place_relevant(pairs, relevant_index);

  RetrievalTask task{TaskKind::KvRetrieval, n_pairs, 2, relevant_index, {vocab.bos}, {values[0]}};
  for (const auto& [k, v] : slots) {
    task.prompt_tokens.push_back(k);
    task.prompt_tokens.push_back(v);
  }
  task.prompt_tokens.push_back(keys[0]);
  return task;
}

/// BOS, then n_docs filler documents of doc_len tokens where the relevant one
/// embeds (marker, answer), then the marker as the question.
inline RetrievalTask gen_mdqa_task(std::size_t n_docs, std::size_t doc_len, std::uint64_t seed,
                                   const VocabLayout& vocab, std::size_t relevant_index) {
  vocab.validate();
  if (n_docs == 0) throw ConfigError("mdqa task needs at least one document");
  if (doc_len < 2) throw ConfigError("mdqa documents need room for a marker and an answer");
  if (relevant_index >= n_docs) throw ConfigError("relevant_index out of range");
  std::mt19937_64 rng(seed);
  const TokenId marker = detail::draw_distinct(rng, vocab.key_begin, vocab.key_end, 1)[0];
  const TokenId answer = detail::draw_distinct(rng, vocab.value_begin, vocab.value_end, 1)[0];
  std::uniform_int_distribution<TokenId> filler(vocab.filler_begin, vocab.filler_end - 1);
  std::uniform_int_distribution<std::size_t> offset(0, doc_len - 2);

  std::vector<std::vector<TokenId>> docs(n_docs);
  for (auto& doc : docs) {
    for (std::size_t i = 0; i < doc_len; ++i) doc.push_back(filler(rng));
  }
  const std::size_t at = offset(rng);
  docs[0][at] = marker;
  docs[0][at + 1] = answer;

  RetrievalTask task{TaskKind::Mdqa, n_docs, doc_len, relevant_index, {vocab.bos}, {answer}};
  for (const auto& doc : detail::place_relevant(docs, relevant_index)) {
    task.prompt_tokens.insert(task.prompt_tokens.end(), doc.begin(), doc.end());
  }
  task.prompt_tokens.push_back(marker);
  return task;
}

/// A seeded generator of retrieval tasks; sample `s` carries the same content
/// at every relevant position.
struct TaskFamily {
  TaskKind kind = TaskKind::KvRetrieval;
  std::size_t n_items = 8;
  std::size_t item_len = 2;  // doc_len for MDQA; fixed at 2 for KV
  VocabLayout vocab;
  std::uint64_t seed = 0;

  static TaskFamily kv(std::size_t n_pairs = 8, std::uint64_t seed = 0) {
    return {TaskKind::KvRetrieval, n_pairs, 2, VocabLayout{}, seed};
  }
  static TaskFamily mdqa(std::size_t n_docs = 10, std::size_t doc_len = 4,
                         std::uint64_t seed = 0) {
    return {TaskKind::Mdqa, n_docs, doc_len, VocabLayout{}, seed};
  }

  std::uint64_t sample_seed(std::size_t sample) const {
    return detail::splitmix64(seed ^ detail::splitmix64(static_cast<std::uint64_t>(sample)));
  }

  RetrievalTask generate(std::size_t relevant_index, std::size_t sample) const {
    const auto s = sample_seed(sample);
    return kind == TaskKind::KvRetrieval ? gen_kv_task(n_items, s, vocab, relevant_index)
                                         : gen_mdqa_task(n_items, item_len, s, vocab,
                                                         relevant_index);
  }

  nlohmann::json to_json() const {
    return {{"task", to_string(kind)},
            {"n_items", n_items},
            {"item_len", item_len},
            {"seed", seed}};
  }
};

/// Either a fixed positional encoder or the full scoring pipeline.
using EvalMethod = std::variant<PositionEncoderSpec, PipelineConfig>;

inline std::string method_label(const EvalMethod& m) {
  if (const auto* e = std::get_if<PositionEncoderSpec>(&m)) return e->label();
  const auto& cfg = std::get<PipelineConfig>(m);
  std::string label = "mspoe";
  if (!std::holds_alternative<ProfilerConfig::PositionAware>(cfg.profiler.strategy)) {
    label += "[" + cfg.profiler.strategy_label() + "]";
  }
  if (cfg.scoring_mode == ScoringMode::InPlacePerLayer) label += "[inplace]";
  return label;
}

inline GenerationResult run_method(const Model& model, std::span<const TokenId> prompt,
                                   const EvalMethod& method, std::size_t max_new) {
  if (const auto* e = std::get_if<PositionEncoderSpec>(&method)) {
    return run_baseline(model, prompt, *e, max_new);
  }
  return run_mspoe(model, prompt, std::get<PipelineConfig>(method), max_new);
}

struct EvalReport {
  std::vector<double> per_position_accuracy;
  double average = 0.0;
  double gap = 0.0;
  std::size_t n_samples = 0;
  std::string encoder_label;

  static EvalReport from_accuracies(std::vector<double> acc, std::size_t n_samples,
                                    std::string label) {
    if (acc.empty()) throw ValidationError("report needs at least one position");
    EvalReport r;
    double total = 0.0;
    for (double a : acc) total += a;
    r.average = total / static_cast<double>(acc.size());
    const auto [lo, hi] = std::minmax_element(acc.begin(), acc.end());
    r.gap = *hi - *lo;
    r.per_position_accuracy = std::move(acc);
    r.n_samples = n_samples;
    r.encoder_label = std::move(label);
    return r;
  }

  nlohmann::json to_json() const {
    return {{"encoder_label", encoder_label},
            {"n_samples", n_samples},
            {"per_position_accuracy", per_position_accuracy},
            {"average", average},
            {"gap", gap}};
  }

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Worker count from MSPE_THREADS; unset or 0 means serial.
inline std::size_t threads_from_env() {
  const char* v = std::getenv("MSPE_THREADS");
  if (v == nullptr || *v == '\0') return 0;
  try {
    return static_cast<std::size_t>(std::stoul(v));
  } catch (const std::exception&) {
    throw ConfigError(std::string("MSPE_THREADS must be a non-negative integer, got '") + v + "'");
  }
}

/// Exact-match accuracy for every relevant-item position over n_samples tasks.
/// Results are reduced in (position, sample) order regardless of `threads`.
inline EvalReport evaluate(const Model& model, const TaskFamily& family, const EvalMethod& method,
                           std::size_t n_samples, std::size_t threads = 0) {
  if (n_samples == 0) throw ValidationError("evaluate needs at least one sample");
  const std::size_t n_pos = family.n_items;
  const std::size_t jobs = n_pos * n_samples;
  std::vector<unsigned char> correct(jobs, 0);

  auto run_job = [&](std::size_t job) {
    const RetrievalTask task = family.generate(job / n_samples, job % n_samples);
    const auto result =
        run_method(model, task.prompt_tokens, method, task.expected_answer.size());
    correct[job] = result.output_tokens == task.expected_answer ? 1 : 0;
  };

  if (threads <= 1) {
    for (std::size_t j = 0; j < jobs; ++j) run_job(j);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (std::size_t j = t; j < jobs; j += threads) run_job(j);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  std::vector<double> acc(n_pos, 0.0);
  for (std::size_t p = 0; p < n_pos; ++p) {
    std::size_t hits = 0;
    for (std::size_t s = 0; s < n_samples; ++s) hits += correct[p * n_samples + s];
    acc[p] = static_cast<double>(hits) / static_cast<double>(n_samples);
  }
  return EvalReport::from_accuracies(std::move(acc), n_samples, method_label(method));
}

/// One report per uniform ratio.
inline std::vector<EvalReport> ratio_sweep(const Model& model, const TaskFamily& family,
                                           const std::vector<double>& ratios,
                                           std::size_t n_samples, std::size_t threads = 0) {
  if (ratios.empty()) throw ValidationError("ratio sweep needs at least one ratio");
  std::vector<EvalReport> out;
  for (double r : ratios) {
    if (!(r > 0.0)) throw ValidationError("sweep ratios must be positive");
    out.push_back(evaluate(model, family, PositionEncoderSpec::uniform(r), n_samples, threads));
  }
  return out;
}

inline std::string format_number(double x) {
  std::ostringstream os;
  os << std::setprecision(17) << x;
  return os.str();
}

inline const char* kReportCsvHeader = "encoder_label,position,accuracy,average,gap";

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cells.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cells.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.emplace_back();
    } else {
      cells.back() += c;
    }
  }
  if (quoted) throw ValidationError("unterminated quote in CSV row");
  return cells;
}

}  // namespace detail

/// One row per (report, position). With `summary_rows`, each report is
/// followed by a row whose position is "all" and whose accuracy is the average.
inline std::string reports_to_csv(const std::vector<EvalReport>& reports,
                                  bool summary_rows = false) {
  std::ostringstream os;
  os << kReportCsvHeader << "\n";
  for (const auto& r : reports) {
    const std::string label = detail::csv_field(r.encoder_label);
    const std::string tail = "," + format_number(r.average) + "," + format_number(r.gap) + "\n";
    for (std::size_t p = 0; p < r.per_position_accuracy.size(); ++p) {
      os << label << "," << p << "," << format_number(r.per_position_accuracy[p]) << tail;
    }
    if (summary_rows) os << label << ",all," << format_number(r.average) << tail;
  }
  return os.str();
}

/// Inverse of reports_to_csv; summary rows are skipped and n_samples, which
/// the CSV does not carry, is left 0.
inline std::vector<EvalReport> reports_from_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != kReportCsvHeader) {
    throw ValidationError("report CSV has an unexpected header");
  }
  std::vector<EvalReport> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != 5) throw ValidationError("report CSV row must have 5 columns: " + line);
    if (cells[1] == "all") continue;
    const auto pos = static_cast<std::size_t>(std::stoul(cells[1]));
    if (out.empty() || out.back().encoder_label != cells[0] || pos == 0) {
      out.push_back(EvalReport{});
      out.back().encoder_label = cells[0];
    }
    auto& r = out.back();
    if (pos != r.per_position_accuracy.size()) throw ValidationError("report CSV rows out of order");
    r.per_position_accuracy.push_back(std::stod(cells[2]));
    r.average = std::stod(cells[3]);
    r.gap = std::stod(cells[4]);
  }
  return out;
}

}  // namespace mspoe
