#pragma once

#include <stdexcept>
#include <string>

namespace lorta {

// Base of every error the library throws. Callers that only care about
// "this input was rejected" can catch this one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or structural mismatch between operands (factor column counts,
// tensor extents, config/state disagreement).
class ShapeError : public Error {
 public:
  using Error::Error;
};

// An index outside the valid range for the object it addresses.
class IndexError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or adapter specification.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered or a numerically undefined request (e.g. fitting a
// zero tensor).
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed checkpoint file or I/O failure.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace lorta
