#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace xwd {

enum class ErrorKind {
  kMissingMetadata,
  kInconsistentShape,
  kTooFewSlices,
  kInvalidSeries,
  kEmptyAfterTrim,
  kInvalidBand,
  kInvalidSpec,
  kEmptyPartition,
  kEmptyTrainingSet,
  kInvalidConfig,
  kShapeMismatch,
  kDimensionMismatch,
  kCorruptCheckpoint,
  kDivergence,
  kEmptyMetrics,
  kTeacherNotFrozen,
  kWindowSetMismatch,
  kMissingWindowModel,
  kDegenerateLabels,
  kProvenanceMismatch,
  kLeakage,
  kSingleClass,
  kLengthMismatch,
  kUnknownLayer,
  kStageFailure,
  kIo,
  kInvalidArgument,
};

std::string_view to_string(ErrorKind kind);

// Every failure raised by the library carries a kind so callers (and the CLI
// exit-code mapping) can branch without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace xwd
