#pragma once

#include <stdexcept>
#include <string>

namespace tfma {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes or geometry that violate an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced or a degenerate numerical problem (e.g. a Weibull fit on
/// an all-equal tail).
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed, missing, or inconsistent dataset / checkpoint contents.
class DataError : public Error {
 public:
  using Error::Error;
};

// Process exit codes used by the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumerical = 4;

}  // namespace tfma
