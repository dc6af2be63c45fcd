#pragma once

#include <stdexcept>
#include <string>

namespace centerseg {

// Root of every error the library throws. Subclasses name the failure class
// so callers (the CLI in particular) can map them onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible shapes, ranks or axes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Argument outside the mathematical domain of an operation (log of 0, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Caller broke a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or numerically singular inputs.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed dataset content (bad label values, inconsistent manifests).
class DataError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace centerseg
