#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace amecam {

enum class ErrorCode {
  MissingFile,
  CorruptHeader,
  ShapeMismatch,
  NonFiniteVoxels,
  MissingMask,
  BadDimensions,
  EmptyCaseList,
  InsufficientCases,
  BadRatios,
  NonFiniteActivation,
  NoPositivePair,
  UnnormalizedEmbedding,
  ChannelMismatch,
  NonFiniteInput,
  BadTargetSize,
  EmptyList,
  MixedResolutions,
  GradientUnavailable,
  ResolutionMismatch,
  BatchTooSmall,
  BadStep,
  SamplerInfeasible,
  IncompatibleCheckpoint,
  BadThreshold,
  EmptyGroundTruth,
  EmptyMask,
  NoEvaluableSamples,
  UnwritablePath,
  BadConfig,
};

std::string_view to_string(ErrorCode code);

// Single exception type; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace amecam
