#include "quantlens/error.hpp"

namespace quantlens {

std::string_view error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidRange: return "invalid_range";
    case ErrorCode::EmptyInput: return "empty_input";
    case ErrorCode::Shape: return "shape";
    case ErrorCode::Numeric: return "numeric";
    case ErrorCode::Config: return "config";
    case ErrorCode::Structure: return "structure";
    case ErrorCode::Calibration: return "calibration";
    case ErrorCode::IncompleteSpec: return "incomplete_spec";
    case ErrorCode::InvalidParameter: return "invalid_parameter";
    case ErrorCode::InvalidGeometry: return "invalid_geometry";
    case ErrorCode::UndefinedMetric: return "undefined_metric";
    case ErrorCode::Degenerate: return "degenerate";
    case ErrorCode::Normalization: return "normalization";
    case ErrorCode::Usage: return "usage";
    case ErrorCode::Ingestion: return "ingestion";
    case ErrorCode::Io: return "io";
  }
  return "unknown";
}

}  // namespace quantlens
