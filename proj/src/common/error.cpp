#include "esrie/error.hpp"

namespace esrie {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::AllZeroImage: return "AllZeroImage";
    case ErrorCode::InclusionOutOfBounds: return "InclusionOutOfBounds";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::UnsupportedMaxval: return "UnsupportedMaxval";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::InvalidImage: return "InvalidImage";
    case ErrorCode::InvalidRoi: return "InvalidRoi";
    case ErrorCode::ImageTooSmall: return "ImageTooSmall";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::ZeroDenominator: return "ZeroDenominator";
    case ErrorCode::ZeroVariance: return "ZeroVariance";
    case ErrorCode::ProfileTooShort: return "ProfileTooShort";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::WrongRoiKind: return "WrongRoiKind";
    case ErrorCode::OddSpatialDims: return "OddSpatialDims";
    case ErrorCode::NonDivisibleDims: return "NonDivisibleDims";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::ChecksumError: return "ChecksumError";
    case ErrorCode::BudgetExceeded: return "BudgetExceeded";
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::DescriptorMismatch: return "DescriptorMismatch";
    case ErrorCode::NonFiniteWeights: return "NonFiniteWeights";
    case ErrorCode::EmptyCalibrationSet: return "EmptyCalibrationSet";
    case ErrorCode::MissingQuantParams: return "MissingQuantParams";
    case ErrorCode::NonPositiveTimestep: return "NonPositiveTimestep";
    case ErrorCode::UnknownKey: return "UnknownKey";
    case ErrorCode::MissingRoi: return "MissingRoi";
    case ErrorCode::InvalidDuration: return "InvalidDuration";
  }
  return "UnknownError";
}

ErrorCategory category_of(ErrorCode code) {
  switch (code) {
    case ErrorCode::UnknownKey:
    case ErrorCode::InvalidConfig:
    case ErrorCode::InvalidDuration:
    case ErrorCode::NonPositiveTimestep:
    case ErrorCode::MissingRoi:
    case ErrorCode::InvalidRoi:
      return ErrorCategory::Config;
    case ErrorCode::NonFiniteLoss:
    case ErrorCode::NonFiniteWeights:
      return ErrorCategory::Numeric;
    default:
      return ErrorCategory::Data;
  }
}

}  // namespace esrie
