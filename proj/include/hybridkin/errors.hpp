#pragma once

#include <stdexcept>
#include <string>

namespace hybridkin {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller supplied something malformed: wrong dimensions, bad config values.
class InputError : public Error {
 public:
  using Error::Error;
};

// Argument outside the closed interval an evaluator is defined on.
class RangeError : public InputError {
 public:
  using InputError::InputError;
};

class SizeError : public InputError {
 public:
  using InputError::InputError;
};

class ParseError : public InputError {
 public:
  using InputError::InputError;
};

class InvalidDepthError : public InputError {
 public:
  using InputError::InputError;
};

// Numerical failures.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class DegenerateDataError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class OptimizationError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class InfeasibilityError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class TrackingInfeasibleError : public NumericalError {
 public:
  TrackingInfeasibleError(std::size_t sample_index, const std::string& what)
      : NumericalError(what), sample_index_(sample_index) {}
  std::size_t sample_index() const noexcept { return sample_index_; }

 private:
  std::size_t sample_index_;
};

}  // namespace hybridkin
