// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

#include "szdl/common.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace szdl {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::UnsupportedDatatype: return "UnsupportedDatatype";
    case ErrorCode::Truncated: return "Truncated";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::SizeTooSmall: return "SizeTooSmall";
    case ErrorCode::EmptyManifest: return "EmptyManifest";
    case ErrorCode::SingleClass: return "SingleClass";
    case ErrorCode::UnknownSite: return "UnknownSite";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::OddExtent: return "OddExtent";
    case ErrorCode::DegenerateBatch: return "DegenerateBatch";
    case ErrorCode::BadProbability: return "BadProbability";
    case ErrorCode::BadLabel: return "BadLabel";
    case ErrorCode::DetachedOutput: return "DetachedOutput";
    case ErrorCode::IndivisibleSERatio: return "IndivisibleSERatio";
    case ErrorCode::BadInputExtent: return "BadInputExtent";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::EmptySplit: return "EmptySplit";
    case ErrorCode::SingleClassSplit: return "SingleClassSplit";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::CorruptPayload: return "CorruptPayload";
    case ErrorCode::MisalignedInputs: return "MisalignedInputs";
    case ErrorCode::TooFewCases: return "TooFewCases";
    case ErrorCode::EmptyList: return "EmptyList";
    case ErrorCode::MixedExtents: return "MixedExtents";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::ConfigError:
    case ErrorCode::InvalidArgument:
    case ErrorCode::IndivisibleSERatio:
    case ErrorCode::BadInputExtent:
    case ErrorCode::BadProbability:
      return 1;
    case ErrorCode::NonFiniteGradient:
    case ErrorCode::NonFiniteLoss:
    case ErrorCode::DegenerateBatch:
    case ErrorCode::TooFewCases:
      return 3;
    default:
      return 2;
  }
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace szdl
