#pragma once

#include <stdexcept>
#include <string>

namespace sparsetree {

// Invalid caller-supplied data (bad dimensions, NaN scores, OOV ids, ...).
struct InputError : std::runtime_error {
  explicit InputError(const std::string& what) : std::runtime_error(what) {}
};

// An operation was asked to run above its supported problem size.
struct SizeLimitError : std::runtime_error {
  explicit SizeLimitError(const std::string& what) : std::runtime_error(what) {}
};

// A documented precondition between components was violated.
struct ContractError : std::logic_error {
  explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

// Numerical breakdown (singular systems, zero norms, diverged solves).
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace sparsetree
