#include "xwd/error.hpp"

namespace xwd {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kMissingMetadata: return "MissingMetadata";
    case ErrorKind::kInconsistentShape: return "InconsistentShape";
    case ErrorKind::kTooFewSlices: return "TooFewSlices";
    case ErrorKind::kInvalidSeries: return "InvalidSeries";
    case ErrorKind::kEmptyAfterTrim: return "EmptyAfterTrim";
    case ErrorKind::kInvalidBand: return "InvalidBand";
    case ErrorKind::kInvalidSpec: return "InvalidSpec";
    case ErrorKind::kEmptyPartition: return "EmptyPartition";
    case ErrorKind::kEmptyTrainingSet: return "EmptyTrainingSet";
    case ErrorKind::kInvalidConfig: return "InvalidConfig";
    case ErrorKind::kShapeMismatch: return "ShapeMismatch";
    case ErrorKind::kDimensionMismatch: return "DimensionMismatch";
    case ErrorKind::kCorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorKind::kDivergence: return "Divergence";
    case ErrorKind::kEmptyMetrics: return "EmptyMetrics";
    case ErrorKind::kTeacherNotFrozen: return "TeacherNotFrozen";
    case ErrorKind::kWindowSetMismatch: return "WindowSetMismatch";
    case ErrorKind::kMissingWindowModel: return "MissingWindowModel";
    case ErrorKind::kDegenerateLabels: return "DegenerateLabels";
    case ErrorKind::kProvenanceMismatch: return "ProvenanceMismatch";
    case ErrorKind::kLeakage: return "Leakage";
    case ErrorKind::kSingleClass: return "SingleClass";
    case ErrorKind::kLengthMismatch: return "LengthMismatch";
    case ErrorKind::kUnknownLayer: return "UnknownLayer";
    case ErrorKind::kStageFailure: return "StageFailure";
    case ErrorKind::kIo: return "Io";
    case ErrorKind::kInvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

}  // namespace xwd
