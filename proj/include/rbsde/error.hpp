#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace rbsde {

enum class Errc {
  NonStochasticLaw,
  EmptySupport,
  DepthMismatch,
  InvalidTree,
  TerminalNode,
  NotCentered,
  InvalidStoppingTime,
  NegativeStart,
  RootNotBracketed,
  DriverEquivalenceViolation,
  NotNormalised,
  ObstacleAboveTerminal,
  NonMonotone,
  FamilyMemberInvalid,
  InvalidTheta,
  KappaInadmissible,
  ScenarioNotAbsolutelyContinuous,
  EmptyPolytope,
  NegativePrice,
  NotComplete,
  OracleTooLarge,
  ParseError,
  ValidationError,
};

constexpr std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::NonStochasticLaw: return "NonStochasticLaw";
    case Errc::EmptySupport: return "EmptySupport";
    case Errc::DepthMismatch: return "DepthMismatch";
    case Errc::InvalidTree: return "InvalidTree";
    case Errc::TerminalNode: return "TerminalNode";
    case Errc::NotCentered: return "NotCentered";
    case Errc::InvalidStoppingTime: return "InvalidStoppingTime";
    case Errc::NegativeStart: return "NegativeStart";
    case Errc::RootNotBracketed: return "RootNotBracketed";
    case Errc::DriverEquivalenceViolation: return "DriverEquivalenceViolation";
    case Errc::NotNormalised: return "NotNormalised";
    case Errc::ObstacleAboveTerminal: return "ObstacleAboveTerminal";
    case Errc::NonMonotone: return "NonMonotone";
    case Errc::FamilyMemberInvalid: return "FamilyMemberInvalid";
    case Errc::InvalidTheta: return "InvalidTheta";
    case Errc::KappaInadmissible: return "KappaInadmissible";
    case Errc::ScenarioNotAbsolutelyContinuous: return "ScenarioNotAbsolutelyContinuous";
    case Errc::EmptyPolytope: return "EmptyPolytope";
    case Errc::NegativePrice: return "NegativePrice";
    case Errc::NotComplete: return "NotComplete";
    case Errc::OracleTooLarge: return "OracleTooLarge";
    case Errc::ParseError: return "ParseError";
    case Errc::ValidationError: return "ValidationError";
  }
  return "Unknown";
}

/// Library exception. `details` carries every violation when several were
/// collected (validation paths aggregate instead of failing fast).
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code),
        details_{message} {}

  Error(Errc code, std::vector<std::string> details)
      : std::runtime_error(join(code, details)), code_(code), details_(std::move(details)) {}

  Errc code() const noexcept { return code_; }
  const std::vector<std::string>& details() const noexcept { return details_; }

 private:
  static std::string join(Errc code, const std::vector<std::string>& details) {
    std::string out(to_string(code));
    out += ":";
    for (const auto& d : details) {
      out += "\n  - ";
      out += d;
    }
    return out;
  }

  Errc code_;
  std::vector<std::string> details_;
};

}  // namespace rbsde
