#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace esrie {

enum class ErrorCode {
  // image_core
  AllZeroImage,
  InclusionOutOfBounds,
  BadMagic,
  TruncatedFile,
  UnsupportedMaxval,
  IoError,
  InvalidImage,
  InvalidRoi,
  // speckle_sim
  ImageTooSmall,
  InvalidConfig,
  // metrics
  ZeroDenominator,
  ZeroVariance,
  ProfileTooShort,
  ShapeMismatch,
  WrongRoiKind,
  // nn_core / edgesrie_net
  OddSpatialDims,
  NonDivisibleDims,
  VersionMismatch,
  ChecksumError,
  BudgetExceeded,
  // training
  EmptyCorpus,
  NonFiniteLoss,
  DescriptorMismatch,
  // quantization
  NonFiniteWeights,
  EmptyCalibrationSet,
  MissingQuantParams,
  // baselines
  NonPositiveTimestep,
  // cli
  UnknownKey,
  MissingRoi,
  InvalidDuration,
};

std::string_view to_string(ErrorCode code);

/// Broad failure class; the CLI maps these onto its exit codes.
enum class ErrorCategory { Config, Data, Numeric };

ErrorCategory category_of(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }
  ErrorCategory category() const noexcept { return category_of(code_); }

 private:
  ErrorCode code_;
};

}  // namespace esrie
