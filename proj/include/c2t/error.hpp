#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace c2t {

enum class ErrorKind {
  InvalidInput,
  ShapeError,
  StateError,
  NotFound,
  IoError,
  FormatError,
  DataError,
  InvalidConfig,
  RangeError,
  EmptyText,
  TokenError,
  InvalidLogProb,
  TargetTooLong,
  InputTooShort,
  ConfigError,
  NoMaskedFrames,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidInput: return "InvalidInput";
    case ErrorKind::ShapeError: return "ShapeError";
    case ErrorKind::StateError: return "StateError";
    case ErrorKind::NotFound: return "NotFound";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::FormatError: return "FormatError";
    case ErrorKind::DataError: return "DataError";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::RangeError: return "RangeError";
    case ErrorKind::EmptyText: return "EmptyText";
    case ErrorKind::TokenError: return "TokenError";
    case ErrorKind::InvalidLogProb: return "InvalidLogProb";
    case ErrorKind::TargetTooLong: return "TargetTooLong";
    case ErrorKind::InputTooShort: return "InputTooShort";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::NoMaskedFrames: return "NoMaskedFrames";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a kind so callers (and the
/// CLI exit-code mapping) can branch without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void raise(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace c2t
