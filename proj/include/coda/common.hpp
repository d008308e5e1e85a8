#pragma once

#include <stdexcept>
#include <string>

namespace coda {

// Floor applied to every logarithm argument and probability denominator.
inline constexpr double kClampEps = 1e-7;

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.99;
inline constexpr double kInEps = 1e-6;

inline constexpr const char* kVersion = "coda 0.1.0";

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes or malformed layer wiring.
struct ShapeError : Error {
  using Error::Error;
};

// NaN/Inf produced by a forward op or fed to the optimizer.
struct NumericError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace coda
