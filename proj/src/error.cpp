#include "amecam/error.hpp"

namespace amecam {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::CorruptHeader: return "CorruptHeader";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteVoxels: return "NonFiniteVoxels";
    case ErrorCode::MissingMask: return "MissingMask";
    case ErrorCode::BadDimensions: return "BadDimensions";
    case ErrorCode::EmptyCaseList: return "EmptyCaseList";
    case ErrorCode::InsufficientCases: return "InsufficientCases";
    case ErrorCode::BadRatios: return "BadRatios";
    case ErrorCode::NonFiniteActivation: return "NonFiniteActivation";
    case ErrorCode::NoPositivePair: return "NoPositivePair";
    case ErrorCode::UnnormalizedEmbedding: return "UnnormalizedEmbedding";
    case ErrorCode::ChannelMismatch: return "ChannelMismatch";
    case ErrorCode::NonFiniteInput: return "NonFiniteInput";
    case ErrorCode::BadTargetSize: return "BadTargetSize";
    case ErrorCode::EmptyList: return "EmptyList";
    case ErrorCode::MixedResolutions: return "MixedResolutions";
    case ErrorCode::GradientUnavailable: return "GradientUnavailable";
    case ErrorCode::ResolutionMismatch: return "ResolutionMismatch";
    case ErrorCode::BatchTooSmall: return "BatchTooSmall";
    case ErrorCode::BadStep: return "BadStep";
    case ErrorCode::SamplerInfeasible: return "SamplerInfeasible";
    case ErrorCode::IncompatibleCheckpoint: return "IncompatibleCheckpoint";
    case ErrorCode::BadThreshold: return "BadThreshold";
    case ErrorCode::EmptyGroundTruth: return "EmptyGroundTruth";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::NoEvaluableSamples: return "NoEvaluableSamples";
    case ErrorCode::UnwritablePath: return "UnwritablePath";
    case ErrorCode::BadConfig: return "BadConfig";
  }
  return "Unknown";
}

}  // namespace amecam
