// Copyright 2026 The mspoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace mspoe {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand dimensions do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A configuration value violates its invariant (odd head_dim, zero heads, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input data is not what the operation accepts (not a distribution, out of range, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A ratio assignment or snapshot does not cover a requested (layer, head).
class CoverageError : public Error {
 public:
  using Error::Error;
};

class WeightFileError : public Error {
 public:
  enum class Kind { MissingFile, BadMagic, BadHeader, ShapeMismatch, NonFinite };

  WeightFileError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace mspoe
