#pragma once

#include <stdexcept>
#include <string>

namespace heatbem {

/// Raised when a requested problem size exceeds a configured memory guard.
class ResourceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when an iterative solver stops without reaching its tolerance.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double residual, int iterations)
      : std::runtime_error(what), residual_(residual), iterations_(iterations) {}

  double residual() const noexcept { return residual_; }
  int iterations() const noexcept { return iterations_; }

 private:
  double residual_;
  int iterations_;
};

/// Raised when a kernel or quadrature produces a non-finite value.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace heatbem
