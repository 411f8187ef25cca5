#pragma once

#include <stdexcept>
#include <string>

namespace vaqat {

// Base for everything the library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller supplied something malformed: bad shapes, bad config, bad file.
// The CLI maps these to exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class UnsupportedBitwidthError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class PolicyError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Failures discovered while running; the CLI maps these to exit code 2.
class RuntimeAbort : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public RuntimeAbort {
 public:
  using RuntimeAbort::RuntimeAbort;
};

class CacheMissError : public RuntimeAbort {
 public:
  using RuntimeAbort::RuntimeAbort;
};

}  // namespace vaqat
