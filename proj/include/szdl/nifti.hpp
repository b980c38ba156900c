// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

// Minimal NIfTI-1 reader/writer. Only the uncompressed single-file layout
// ("n+1\0") is accepted; detached headers and .nii.gz are rejected.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "szdl/volume.hpp"

namespace szdl::nifti {

inline constexpr std::int32_t kHeaderSize = 348;
inline constexpr std::size_t kVoxOffset = 352;

enum Datatype : std::int16_t {
  kUint8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
};

struct Header {
  std::int32_t sizeof_hdr = kHeaderSize;
  std::array<std::int16_t, 8> dim{};
  std::int16_t datatype = kFloat32;
  std::int16_t bitpix = 32;
  float vox_offset = static_cast<float>(kVoxOffset);
  float scl_slope = 1.0F;
  float scl_inter = 0.0F;
  std::array<float, 8> pixdim{};
  std::int16_t qform_code = 0;
  std::int16_t sform_code = 0;
  std::array<float, 4> srow_x{};
  std::array<float, 4> srow_y{};
  std::array<float, 4> srow_z{};
  std::array<char, 4> magic{'n', '+', '1', '\0'};
  bool little_endian = true;
};

/// Bits per voxel for a supported datatype code; 0 otherwise.
int bitpix_for(std::int16_t datatype);

/// Decodes a single-file NIfTI-1 image. Endianness is inferred from sizeof_hdr.
/// In strict mode non-finite voxel values raise NonFiniteValue.
std::pair<Header, Volume> parse(std::span<const std::uint8_t> bytes, bool strict = true);

/// Little-endian float32 encoding with scl_slope=1, scl_inter=0, vox_offset=352.
std::vector<std::uint8_t> write(const Volume& volume);

Volume load(const std::filesystem::path& path, bool strict = true);
void save(const Volume& volume, const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace szdl::nifti
