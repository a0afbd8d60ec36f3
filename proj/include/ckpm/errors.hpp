#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ckpm {

// Shape mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid argument values (ranges, permutations, ...).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed or inconsistent configuration. The CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Failure of a numerical routine. The CLI maps this to exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised by Cholesky when a non-positive pivot is met.
class NotPositiveDefiniteError : public NumericalError {
 public:
  NotPositiveDefiniteError(std::size_t pivot, double value)
      : NumericalError("matrix is not positive definite: pivot " + std::to_string(pivot) +
                       " has value " + std::to_string(value)),
        pivot_(pivot) {}
  std::size_t pivot() const noexcept { return pivot_; }

 private:
  std::size_t pivot_;
};

// A simulator produced a non-finite state.
class InstabilityError : public NumericalError {
 public:
  InstabilityError(const std::string& what, long step) : NumericalError(what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace ckpm
