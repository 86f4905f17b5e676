#pragma once

#include <stdexcept>
#include <string>

namespace cascade {

// Error taxonomy shared by the library and the command-line tool. The CLI
// maps each category onto a process exit code (see exit_code()).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad invocation of an API (wrong argument kind, non-scalar loss, ...).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or semantically invalid input data.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or other numeric failure.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Tensor extents that do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

inline int exit_code(const Error& e) {
  if (dynamic_cast<const DataError*>(&e)) return 3;
  if (dynamic_cast<const NumericError*>(&e)) return 4;
  return 2;
}

}  // namespace cascade
