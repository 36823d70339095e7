#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace corr_attn {

enum class ErrorCode {
  MagicMismatch,
  VersionUnsupported,
  DimensionMismatch,
  DuplicateId,
  ZeroVector,
  TruncatedFile,
  InvalidLabel,
  IoFailure,
  InvalidParam,
  EmptyIndex,
  EmptyMask,
  EmptyCandidates,
  UnknownQuery,
  UnknownSession,
  StaticCondition,
  SessionFinalized,
  StorageFailure,
  ReplayMismatch,
  InsufficientStratum,
  MalformedSubmission,
  StaticConditionLine,
  DegenerateGroups,
  BadRequest,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MagicMismatch: return "MagicMismatch";
    case ErrorCode::VersionUnsupported: return "VersionUnsupported";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::InvalidLabel: return "InvalidLabel";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::InvalidParam: return "InvalidParam";
    case ErrorCode::EmptyIndex: return "EmptyIndex";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::EmptyCandidates: return "EmptyCandidates";
    case ErrorCode::UnknownQuery: return "UnknownQuery";
    case ErrorCode::UnknownSession: return "UnknownSession";
    case ErrorCode::StaticCondition: return "StaticCondition";
    case ErrorCode::SessionFinalized: return "SessionFinalized";
    case ErrorCode::StorageFailure: return "StorageFailure";
    case ErrorCode::ReplayMismatch: return "ReplayMismatch";
    case ErrorCode::InsufficientStratum: return "InsufficientStratum";
    case ErrorCode::MalformedSubmission: return "MalformedSubmission";
    case ErrorCode::StaticConditionLine: return "StaticConditionLine";
    case ErrorCode::DegenerateGroups: return "DegenerateGroups";
    case ErrorCode::BadRequest: return "BadRequest";
  }
  return "Unknown";
}

/// Every failure in the library is reported as an Error carrying a stable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code), detail_(message) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

}  // namespace corr_attn
