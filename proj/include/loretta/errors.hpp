#pragma once

#include <stdexcept>
#include <string>

namespace loretta {

// Base class for every error raised by the library. The CLI maps the
// concrete subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller passed something that violates a precondition.
class InputError : public Error {
 public:
  using Error::Error;
};

// A sequence or batch does not fit the configured context.
class LengthError : public InputError {
 public:
  using InputError::InputError;
};

// Symbol or value could not be mapped to a token.
class EncodingError : public InputError {
 public:
  using InputError::InputError;
};

// Command-line or configuration misuse.
class UsageError : public Error {
 public:
  using Error::Error;
};

// On-disk data is malformed or inconsistent.
class FormatError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf detected in a loss, gradient, or norm.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace loretta
