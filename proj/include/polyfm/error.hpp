#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace polyfm {

enum class ErrorKind {
  InvalidInput,
  InvalidConfig,
  DegenerateWeights,
  InvalidLabel,
  Convergence,
  Numeric,
  Io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidInput: return "invalid-input";
    case ErrorKind::InvalidConfig: return "invalid-config";
    case ErrorKind::DegenerateWeights: return "degenerate-weights";
    case ErrorKind::InvalidLabel: return "invalid-label";
    case ErrorKind::Convergence: return "convergence";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Raised when an iterative solver does not reach its tolerance. Carries the
/// residual history so callers can decide whether to substep or give up.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, std::vector<double> history)
      : Error(ErrorKind::Convergence, what), history_(std::move(history)) {}

  const std::vector<double>& residual_history() const noexcept { return history_; }

 private:
  std::vector<double> history_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

}  // namespace polyfm
