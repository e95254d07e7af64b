#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace chop {

enum class ErrorCode {
  InvalidDimension,
  InvalidConfig,
  InvalidHyperParameter,
  IntegrationOverflow,
  Factorization,
  LinearSolve,
  DegenerateEnsemble,
  DegenerateMatrix,
  CollapsedEnsemble,
  UnsupportedEnsembleSize,
  Domain,
  Io,
};

std::string_view to_string(ErrorCode code);

/// Exception carrying a machine-readable category alongside the message.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidDimension: return "invalid-dimension";
    case ErrorCode::InvalidConfig: return "invalid-config";
    case ErrorCode::InvalidHyperParameter: return "invalid-hyper-parameter";
    case ErrorCode::IntegrationOverflow: return "integration-overflow";
    case ErrorCode::Factorization: return "factorization";
    case ErrorCode::LinearSolve: return "linear-solve";
    case ErrorCode::DegenerateEnsemble: return "degenerate-ensemble";
    case ErrorCode::DegenerateMatrix: return "degenerate-matrix";
    case ErrorCode::CollapsedEnsemble: return "collapsed-ensemble";
    case ErrorCode::UnsupportedEnsembleSize: return "unsupported-ensemble-size";
    case ErrorCode::Domain: return "domain";
    case ErrorCode::Io: return "io";
  }
  return "unknown";
}

}  // namespace chop
