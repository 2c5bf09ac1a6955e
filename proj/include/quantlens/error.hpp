#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace quantlens {

enum class ErrorCode {
  InvalidRange = 1,
  EmptyInput,
  Shape,
  Numeric,
  Config,
  Structure,
  Calibration,
  IncompleteSpec,
  InvalidParameter,
  InvalidGeometry,
  UndefinedMetric,
  Degenerate,
  Normalization,
  Usage,
  Ingestion,
  Io,
};

std::string_view error_code_name(ErrorCode code) noexcept;

// Every failure raised by the library carries one of the codes above so the C
// boundary can translate it without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Raised by forward passes when a layer produces NaN/Inf.
class NumericError : public Error {
 public:
  NumericError(std::size_t layer_index, const std::string& message)
      : Error(ErrorCode::Numeric, message), layer_index_(layer_index) {}

  std::size_t layer_index() const noexcept { return layer_index_; }

 private:
  std::size_t layer_index_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace quantlens
