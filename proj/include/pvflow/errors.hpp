// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pvflow {

enum class ErrorCode {
  ShapeError,
  KTooLarge,
  UnrecordedNode,
  NonFinite,
  UnequalSizes,
  BadMagic,
  TruncatedFile,
  NonFiniteValue,
  ZeroRow,
  InvalidConfig,
  IoError,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::KTooLarge: return "KTooLarge";
    case ErrorCode::UnrecordedNode: return "UnrecordedNode";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::UnequalSizes: return "UnequalSizes";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::ZeroRow: return "ZeroRow";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

/// Every failure raised by the library. The message always starts with the
/// error code name so callers matching on text (the CLI, scripts) can rely on it.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& detail) { throw Error(code, detail); }

}  // namespace pvflow
