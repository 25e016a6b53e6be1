// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace qelab {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller passed arguments that violate an operation's contract.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Tensor shapes that cannot be combined.
class DimensionError : public UsageError {
 public:
  using UsageError::UsageError;
};

// Bad or incomplete configuration (missing field, empty vocab band, ...).
class ConfigError : public UsageError {
 public:
  using UsageError::UsageError;
};

// Input data that cannot be used: malformed rows, out-of-range scores,
// degenerate statistics.
class DataError : public Error {
 public:
  using Error::Error;
};

// Checkpoint files: bad magic, version mismatch, truncation.
class FormatError : public DataError {
 public:
  using DataError::DataError;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

// A checkpoint of one head mode used where the other is required.
class ModeError : public UsageError {
 public:
  using UsageError::UsageError;
};

// NaN/Inf where a finite value is required, undefined correlations.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace qelab
