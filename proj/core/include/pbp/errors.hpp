#pragma once

#include <stdexcept>
#include <string>

namespace pbp {

// Root of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes or extents that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// An argument outside its admissible range (temperature, lambda, ids...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// A quantity that is mathematically undefined for the given input,
// e.g. the direction of a zero vector.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Caller broke an API precondition (non-scalar loss, missing graph...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Bundle / checkpoint decoding failures. `kind` is a short stable tag
// ("magic", "version", "truncated", "header", "validation", ...).
class LoadError : public Error {
 public:
  LoadError(std::string kind, const std::string& what)
      : Error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double residual, int iterations)
      : Error(what), residual_(residual), iterations_(iterations) {}
  double residual() const noexcept { return residual_; }
  int iterations() const noexcept { return iterations_; }

 private:
  double residual_;
  int iterations_;
};

// Base/new split violations and undefined metrics.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

}  // namespace pbp
