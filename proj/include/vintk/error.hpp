#pragma once

#include <stdexcept>
#include <string>

namespace vintk {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or layer shapes that do not compose.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced somewhere, a solver that failed to converge, or a
/// numerically singular system.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed user input: genotype encodings, config files, unknown names.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// A constrained search could not find feasible candidates.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

}  // namespace vintk
