#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mvflow {

enum class ErrorKind {
  DegeneratePoint,
  ManifoldMismatch,
  UnsupportedOrder,
  SupportTooLarge,
  InvalidGrid,
  NonFinite,
  MissingAuxiliary,
  BudgetExhausted,
  ConfigInvalid,
  OutputUnwritable,
  InvalidArgument,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::DegeneratePoint: return "DegeneratePoint";
    case ErrorKind::ManifoldMismatch: return "ManifoldMismatch";
    case ErrorKind::UnsupportedOrder: return "UnsupportedOrder";
    case ErrorKind::SupportTooLarge: return "SupportTooLarge";
    case ErrorKind::InvalidGrid: return "InvalidGrid";
    case ErrorKind::NonFinite: return "NonFinite";
    case ErrorKind::MissingAuxiliary: return "MissingAuxiliary";
    case ErrorKind::BudgetExhausted: return "BudgetExhausted";
    case ErrorKind::ConfigInvalid: return "ConfigInvalid";
    case ErrorKind::OutputUnwritable: return "OutputUnwritable";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

}  // namespace mvflow
