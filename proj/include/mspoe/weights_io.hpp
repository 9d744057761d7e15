// Copyright 2026 The mspoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mspoe/error.hpp"
#include "mspoe/model.hpp"

// Layout (little-endian):
//   "MSPE" | u32 version | u32 n_layers, n_heads, head_dim, mlp_dim, vocab_size,
//   max_seq_len, tied_output | f64 rope_base | u32 tensor_count |
//   tensor_count x (u16 name_len, name, u8 rank, u32 dims[rank], f64 payload)

namespace mspoe {

inline constexpr std::array<char, 4> kWeightMagic{'M', 'S', 'P', 'E'};
inline constexpr std::uint32_t kWeightVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void raw(const std::string& s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  const std::vector<char>& bytes() const noexcept { return bytes_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(take(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(take(4)); }
  double f64() { return std::bit_cast<double>(take(8)); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  bool done() const noexcept { return pos_ == bytes_.size(); }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw WeightFileError(WeightFileError::Kind::BadHeader,
                            "weight file truncated at byte " + std::to_string(pos_));
    }
  }
  std::uint64_t take(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::vector<char> bytes_;
  std::size_t pos_ = 0;
};

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> dims;
  std::span<double> data;
};

// Tensors in file order, pointing into `w`.
inline std::vector<NamedTensor> tensor_table(const ModelConfig& c, Weights& w) {
  std::vector<NamedTensor> t;
  auto mat = [&](std::string name, Matrix& m) {
    t.push_back({std::move(name), {m.rows(), m.cols()}, m.span()});
  };
  auto vec = [&](std::string name, Vector& v) {
    t.push_back({std::move(name), {v.size()}, v.span()});
  };
  mat("tok_embedding", w.token_embedding);
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    auto& l = w.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    vec(p + "attn_norm", l.attn_norm);
    mat(p + "wq", l.wq);
    mat(p + "wk", l.wk);
    mat(p + "wv", l.wv);
    mat(p + "wo", l.wo);
    vec(p + "mlp_norm", l.mlp_norm);
    mat(p + "w_gate", l.w_gate);
    mat(p + "w_up", l.w_up);
    mat(p + "w_down", l.w_down);
  }
  vec("final_norm", w.final_norm);
  if (!c.tied_output) mat("output", w.output);
  return t;
}

inline std::uint32_t to_u32(std::size_t v, const char* what) {
  if (v > 0xffffffffu) throw ConfigError(std::string(what) + " does not fit in 32 bits");
  return static_cast<std::uint32_t>(v);
}

}  // namespace detail

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},   {"n_heads", c.n_heads},
          {"head_dim", c.head_dim},   {"mlp_dim", c.mlp_dim},
          {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
          {"tied_output", c.tied_output}, {"rope_base", c.rope.base}};
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& weights) {
  auto p = weights;
  p += ".json";
  return p;
}

/// Writes the binary file and its JSON sidecar (same path plus ".json").
inline void save_weights(const std::filesystem::path& path, const ModelConfig& config,
                         const Weights& weights) {
  validate_weights(config, weights);
  Weights copy = weights;
  const auto tensors = detail::tensor_table(config, copy);

  detail::ByteWriter out;
  out.raw(std::string(kWeightMagic.begin(), kWeightMagic.end()));
  out.u32(kWeightVersion);
  out.u32(detail::to_u32(config.n_layers, "n_layers"));
  out.u32(detail::to_u32(config.n_heads, "n_heads"));
  out.u32(detail::to_u32(config.head_dim, "head_dim"));
  out.u32(detail::to_u32(config.mlp_dim, "mlp_dim"));
  out.u32(detail::to_u32(config.vocab_size, "vocab_size"));
  out.u32(detail::to_u32(config.max_seq_len, "max_seq_len"));
  out.u32(config.tied_output ? 1 : 0);
  out.f64(config.rope.base);
  out.u32(detail::to_u32(tensors.size(), "tensor count"));
  nlohmann::json listing = nlohmann::json::array();
  for (const auto& t : tensors) {
    out.u16(static_cast<std::uint16_t>(t.name.size()));
    out.raw(t.name);
    out.u8(static_cast<std::uint8_t>(t.dims.size()));
    for (std::size_t d : t.dims) out.u32(detail::to_u32(d, "tensor dim"));
    for (double x : t.data) out.f64(x);
    listing.push_back({{"name", t.name}, {"shape", t.dims}});
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f.write(out.bytes().data(), static_cast<std::streamsize>(out.bytes().size()));
  if (!f) throw Error("failed writing " + path.string());

  std::ofstream side(sidecar_path(path), std::ios::trunc);
  if (!side) throw Error("cannot open " + sidecar_path(path).string() + " for writing");
  const nlohmann::json meta{{"format", "mspe"},
                            {"version", kWeightVersion},
                            {"config", config_to_json(config)},
                            {"tensors", listing}};
  side << meta.dump(2) << "\n";
}

inline std::pair<ModelConfig, Weights> load_weights(const std::filesystem::path& path) {
  using Kind = WeightFileError::Kind;
  std::ifstream f(path, std::ios::binary);
  if (!f) throw WeightFileError(Kind::MissingFile, "cannot open weight file " + path.string());
  detail::ByteReader in(std::vector<char>(std::istreambuf_iterator<char>(f), {}));

  const std::string magic = [&] {
    try {
      return in.raw(4);
    } catch (const WeightFileError&) {
      throw WeightFileError(Kind::BadMagic, path.string() + " is too short to be a weight file");
    }
  }();
  if (magic != std::string(kWeightMagic.begin(), kWeightMagic.end())) {
    throw WeightFileError(Kind::BadMagic, path.string() + " does not start with MSPE");
  }
  const std::uint32_t version = in.u32();
  if (version != kWeightVersion) {
    throw WeightFileError(Kind::BadHeader, "unsupported weight file version " +
                                               std::to_string(version));
  }
  ModelConfig c;
  c.n_layers = in.u32();
  c.n_heads = in.u32();
  c.head_dim = in.u32();
  c.mlp_dim = in.u32();
  c.vocab_size = in.u32();
  c.max_seq_len = in.u32();
  const std::uint32_t tied = in.u32();
  if (tied > 1) throw WeightFileError(Kind::BadHeader, "tied_output flag must be 0 or 1");
  c.tied_output = tied == 1;
  c.rope = RopeParams{c.head_dim, in.f64()};
  try {
    c.validate();
  } catch (const Error& e) {
    throw WeightFileError(Kind::BadHeader, std::string("invalid config: ") + e.what());
  }

  // Refuse to allocate more than the file could hold.
  const double h = static_cast<double>(c.hidden_dim());
  const double params =
      static_cast<double>(c.vocab_size) * h * (c.tied_output ? 1.0 : 2.0) + h +
      static_cast<double>(c.n_layers) * (4.0 * h * h + 2.0 * h + 3.0 * h * static_cast<double>(c.mlp_dim));
  if (params * 8.0 > static_cast<double>(in.remaining())) {
    throw WeightFileError(Kind::BadHeader, "weight file is shorter than its header implies");
  }
  Weights w = Weights::zeros(c);
  const auto expected = detail::tensor_table(c, w);
  const std::uint32_t count = in.u32();
  if (count != expected.size()) {
    throw WeightFileError(Kind::ShapeMismatch, "file holds " + std::to_string(count) +
                                                   " tensors, config needs " +
                                                   std::to_string(expected.size()));
  }
  for (const auto& t : expected) {
    const std::string name = in.raw(in.u16());
    if (name != t.name) {
      throw WeightFileError(Kind::ShapeMismatch,
                            "expected tensor " + t.name + ", found " + name);
    }
    std::vector<std::size_t> dims(in.u8());
    for (auto& d : dims) d = in.u32();
    if (dims != t.dims) {
      throw WeightFileError(Kind::ShapeMismatch, "tensor " + name + " has the wrong shape");
    }
    for (double& x : t.data) {
      x = in.f64();
      if (!std::isfinite(x)) {
        throw WeightFileError(Kind::NonFinite, "tensor " + name + " holds a non-finite value");
      }
    }
  }
  if (!in.done()) throw WeightFileError(Kind::BadHeader, "trailing bytes after the last tensor");
  return {c, std::move(w)};
}

}  // namespace mspoe
