#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace prunelab {

enum class ErrorCode {
  kShapeMismatch,
  kInvalidArgument,
  kOutOfRange,
  kInvalidModel,
  kStaleCapture,
  kBadMagic,
  kVersionMismatch,
  kTruncated,
  kSizeMismatch,
  kMalformedHeader,
  kIo,
  kDataFormat,
  kDivergence,
  kInfeasible,
  kConfig,
};

std::string_view to_string(ErrorCode code);

// Every failure in the library surfaces as an Error carrying a stable code;
// callers (the CLI in particular) branch on code(), never on message text.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Raised when a removal budget cannot be met without emptying a cluster or
// a layer. max_feasible() is the largest budget that would have worked.
class InfeasibleError : public Error {
 public:
  InfeasibleError(std::size_t requested, std::size_t max_feasible, const std::string& context);

  std::size_t requested() const noexcept { return requested_; }
  std::size_t max_feasible() const noexcept { return max_feasible_; }

 private:
  std::size_t requested_;
  std::size_t max_feasible_;
};

}  // namespace prunelab
