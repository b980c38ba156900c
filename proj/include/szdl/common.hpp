// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace szdl {

enum class ErrorCode {
  // volume-io
  BadMagic,
  UnsupportedDatatype,
  Truncated,
  DimMismatch,
  NonFiniteValue,
  SizeTooSmall,
  EmptyManifest,
  SingleClass,
  UnknownSite,
  // tensor / model
  ShapeMismatch,
  OddExtent,
  DegenerateBatch,
  BadProbability,
  BadLabel,
  DetachedOutput,
  IndivisibleSERatio,
  BadInputExtent,
  // trainer
  NonFiniteGradient,
  NonFiniteLoss,
  EmptySplit,
  SingleClassSplit,
  VersionMismatch,
  CorruptPayload,
  // evalstats
  MisalignedInputs,
  TooFewCases,
  // gradcam
  EmptyList,
  MixedExtents,
  // plumbing
  InvalidArgument,
  ConfigError,
  IoError,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Process exit code for the CLI: 1 config, 2 data, 3 numerical failure.
int exit_code_for(ErrorCode code);

using Rng = std::mt19937_64;

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and a tuple of ids,
/// e.g. (seed, sample id, epoch). Order of ids matters.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> ids) {
  std::uint64_t h = mix64(base);
  for (std::uint64_t id : ids) h = mix64(h ^ mix64(id + 0x632be59bd9b4e019ULL));
  return h;
}

/// Keeps large tensor buffers on the heap instead of fresh mmaps (glibc only;
/// a no-op elsewhere). Cuts page-fault time during training.
void tune_allocator();

}  // namespace szdl
