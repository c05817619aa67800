#pragma once

#include <stdexcept>
#include <string>

namespace mstein {

// Error categories map one-to-one onto CLI exit codes.

/// Unreadable or malformed input data (exit code 2).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss or other numerical breakdown (exit code 3).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value or incompatible checkpoint (exit code 4).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mstein
