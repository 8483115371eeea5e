#pragma once

#include <stdexcept>
#include <string>

namespace monohom {

/// Invalid or inconsistent user-facing input (grid sizes, config keys,
/// out-of-range parameters).  The CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// An iterative solver failed to reach its tolerance.  Carries the final
/// residual so callers can report it.  The CLI maps this to exit code 3.
class SolverError : public std::runtime_error {
 public:
  SolverError(const std::string& what, double rel_residual, int iterations)
      : std::runtime_error(what),
        rel_residual(rel_residual),
        iterations(iterations) {}
  double rel_residual = 0.0;
  int iterations = 0;
};

/// A structural invariant that the implementation promises to maintain was
/// violated (ellipticity sandwich, flux identity, partition sum, ...).
/// The CLI maps this to exit code 4.
class InvariantError : public std::runtime_error {
 public:
  explicit InvariantError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace monohom
