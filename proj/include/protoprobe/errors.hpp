#pragma once

#include <stdexcept>
#include <string>

namespace protoprobe {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes or dimensions that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Zero-norm vectors, all-zero token maps and similar inputs with no defined answer.
class DegenerateError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf seen where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk data (bad magic, truncated file, unknown version).
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

/// An operation invoked out of order, e.g. backward before forward.
class StateError : public Error {
 public:
  using Error::Error;
};

/// Invalid user-supplied configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A result grid with holes.
class CoverageError : public Error {
 public:
  using Error::Error;
};

}  // namespace protoprobe
