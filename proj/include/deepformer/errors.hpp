#pragma once

#include <stdexcept>
#include <string>

namespace deepformer {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Tensor extents do not line up (matmul inner dims, broadcast shapes, ...).
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Token id or axis outside its valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

// Invalid model/run configuration (bad depth, missing omega profile, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed input data (corpus files, negative variances, length mismatch).
class DataError : public Error {
 public:
  using Error::Error;
};

// Variance profiling could not run (empty or all-pad batch).
class ProfilingError : public Error {
 public:
  using Error::Error;
};

// A non-finite value reached a place that requires finite input.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// A runtime contract was violated (e.g. attention row with no allowed keys).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Tape used in the wrong state (backward twice without a fresh forward).
class StateError : public Error {
 public:
  using Error::Error;
};

// Omega folding requested on a model that cannot be folded.
class FoldError : public Error {
 public:
  using Error::Error;
};

}  // namespace deepformer
