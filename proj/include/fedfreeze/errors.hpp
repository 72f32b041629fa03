#pragma once

#include <stdexcept>
#include <string>

namespace fedfreeze {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Caller-supplied values outside the accepted domain.
class InputError : public Error {
 public:
  using Error::Error;
};

/// An operation invoked against missing or stale state (caches, calibration).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Malformed files (IDX, scenario).
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace fedfreeze
