#pragma once

#include <stdexcept>
#include <string>

namespace lukv {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unusable parameters or configuration. CLI exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent data (bad tensors, broken manifests, NaN
/// scores, I/O failures). CLI exit code 3.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Budget constraint cannot be satisfied. CLI exit code 4.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

/// A metric was requested on a trace that lacks its input tensor.
class MetricUnavailableError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

}  // namespace lukv
