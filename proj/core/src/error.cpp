#include "prunelab/error.hpp"

namespace prunelab {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShapeMismatch: return "shape_mismatch";
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kOutOfRange: return "out_of_range";
    case ErrorCode::kInvalidModel: return "invalid_model";
    case ErrorCode::kStaleCapture: return "stale_capture";
    case ErrorCode::kBadMagic: return "bad_magic";
    case ErrorCode::kVersionMismatch: return "version_mismatch";
    case ErrorCode::kTruncated: return "truncated";
    case ErrorCode::kSizeMismatch: return "size_mismatch";
    case ErrorCode::kMalformedHeader: return "malformed_header";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kDataFormat: return "data_format";
    case ErrorCode::kDivergence: return "divergence";
    case ErrorCode::kInfeasible: return "infeasible";
    case ErrorCode::kConfig: return "config";
  }
  return "unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

InfeasibleError::InfeasibleError(std::size_t requested, std::size_t max_feasible,
                                 const std::string& context)
    : Error(ErrorCode::kInfeasible,
            context + ": cannot remove " + std::to_string(requested) +
                " filters; maximum feasible is " + std::to_string(max_feasible)),
      requested_(requested),
      max_feasible_(max_feasible) {}

}  // namespace prunelab
