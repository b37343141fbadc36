#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace oodadv {

enum class ErrorCode {
  kNotPositiveDefinite,
  kNotSymmetric,
  kDimensionMismatch,
  kNonFiniteValue,
  kMalformedFile,
  kIoError,
  kBadMagic,
  kTruncatedFile,
  kDimensionZero,
  kShapeMismatch,
  kDiverged,
  kNonFiniteGradient,
  kZeroNormEmbedding,
  kClassUnderpopulated,
  kEmptyEnsemble,
  kNonFiniteScore,
  kEmptyInput,
  kInvalidArgument,
  kConfigError,
};

std::string_view to_string(ErrorCode code);

// Every failure in the library is reported as an Error carrying a code; the
// CLI maps codes onto process exit statuses.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace oodadv
