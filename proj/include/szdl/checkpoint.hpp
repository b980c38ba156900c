// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

// Checkpoint container. Layout (all integers little-endian):
//   "SZDL" | u32 version | u64 json_len | json bytes | u64 array_count |
//   array_count x { u32 name_len | name | u32 ndim | ndim x u64 dim | u64 count | count x f32 }

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "szdl/model.hpp"
#include "szdl/tensor.hpp"

namespace szdl {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
/// Throws BadMagic, VersionMismatch or CorruptPayload.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void write_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Stores meta["model_config"] plus every parameter and buffer under its name.
template <typename Real>
void export_model(const Model<Real>& model, Checkpoint& checkpoint);
/// Rebuilds the model from meta["model_config"] and restores all values.
template <typename Real>
Model<Real> import_model(const Checkpoint& checkpoint);

}  // namespace szdl
