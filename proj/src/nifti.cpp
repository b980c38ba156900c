// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

#include "szdl/nifti.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>

#include "szdl/common.hpp"

namespace szdl::nifti {
namespace {

// Header field byte offsets.
constexpr std::size_t kOffDim = 40;
constexpr std::size_t kOffDatatype = 70;
constexpr std::size_t kOffBitpix = 72;
constexpr std::size_t kOffPixdim = 76;
constexpr std::size_t kOffVoxOffset = 108;
constexpr std::size_t kOffSclSlope = 112;
constexpr std::size_t kOffSclInter = 116;
constexpr std::size_t kOffXyztUnits = 123;
constexpr std::size_t kOffQformCode = 252;
constexpr std::size_t kOffSformCode = 254;
constexpr std::size_t kOffSrowX = 280;
constexpr std::size_t kOffSrowY = 296;
constexpr std::size_t kOffSrowZ = 312;
constexpr std::size_t kOffMagic = 344;

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, bool little) : bytes_(bytes), little_(little) {}

  template <typename T>
  T get(std::size_t offset) const {
    std::array<std::uint8_t, sizeof(T)> raw{};
    std::memcpy(raw.data(), bytes_.data() + offset, sizeof(T));
    if (little_ != (std::endian::native == std::endian::little)) std::reverse(raw.begin(), raw.end());
    T value;
    std::memcpy(&value, raw.data(), sizeof(T));
    return value;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  bool little_;
};

template <typename T>
void put_le(std::vector<std::uint8_t>& out, std::size_t offset, T value) {
  std::array<std::uint8_t, sizeof(T)> raw{};
  std::memcpy(raw.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
  std::memcpy(out.data() + offset, raw.data(), sizeof(T));
}

}  // namespace

int bitpix_for(std::int16_t datatype) {
  switch (datatype) {
    case kUint8: return 8;
    case kInt16: return 16;
    case kInt32: return 32;
    case kFloat32: return 32;
    case kFloat64: return 64;
    default: return 0;
  }
}

std::pair<Header, Volume> parse(std::span<const std::uint8_t> bytes, bool strict) {
  if (bytes.size() < kVoxOffset) {
    throw Error(ErrorCode::Truncated, "file shorter than the 352-byte header block");
  }
  Header h;
  if (Reader(bytes, true).get<std::int32_t>(0) == kHeaderSize) {
    h.little_endian = true;
  } else if (Reader(bytes, false).get<std::int32_t>(0) == kHeaderSize) {
    h.little_endian = false;
  } else {
    throw Error(ErrorCode::BadMagic, "sizeof_hdr is not 348 in either byte order");
  }
  const Reader r(bytes, h.little_endian);

  std::memcpy(h.magic.data(), bytes.data() + kOffMagic, 4);
  if (h.magic != std::array<char, 4>{'n', '+', '1', '\0'}) {
    if (h.magic == std::array<char, 4>{'n', 'i', '1', '\0'}) {
      throw Error(ErrorCode::BadMagic, "detached header/image pairs (ni1) are not supported");
    }
    throw Error(ErrorCode::BadMagic, "magic is not \"n+1\\0\"");
  }

  for (std::size_t i = 0; i < 8; ++i) {
    h.dim[i] = r.get<std::int16_t>(kOffDim + 2 * i);
    h.pixdim[i] = r.get<float>(kOffPixdim + 4 * i);
  }
  h.datatype = r.get<std::int16_t>(kOffDatatype);
  h.bitpix = r.get<std::int16_t>(kOffBitpix);
  h.vox_offset = r.get<float>(kOffVoxOffset);
  h.scl_slope = r.get<float>(kOffSclSlope);
  h.scl_inter = r.get<float>(kOffSclInter);
  h.qform_code = r.get<std::int16_t>(kOffQformCode);
  h.sform_code = r.get<std::int16_t>(kOffSformCode);
  for (std::size_t i = 0; i < 4; ++i) {
    h.srow_x[i] = r.get<float>(kOffSrowX + 4 * i);
    h.srow_y[i] = r.get<float>(kOffSrowY + 4 * i);
    h.srow_z[i] = r.get<float>(kOffSrowZ + 4 * i);
  }

  const int expected_bits = bitpix_for(h.datatype);
  if (expected_bits == 0) {
    throw Error(ErrorCode::UnsupportedDatatype, "datatype code " + std::to_string(h.datatype));
  }
  if (h.bitpix != expected_bits) {
    throw Error(ErrorCode::UnsupportedDatatype, "bitpix " + std::to_string(h.bitpix) +
                                                    " inconsistent with datatype " +
                                                    std::to_string(h.datatype));
  }

  const int ndim = h.dim[0];
  if (ndim < 3 || ndim > 7) throw Error(ErrorCode::DimMismatch, "dim[0] must be in [3, 7]");
  for (int i = 1; i <= 3; ++i) {
    if (h.dim[i] <= 0) throw Error(ErrorCode::DimMismatch, "spatial extent of 0");
  }
  for (int i = 4; i <= ndim; ++i) {
    if (h.dim[i] != 1) {
      throw Error(ErrorCode::DimMismatch, "non-singleton dimension " + std::to_string(i) +
                                              "; only 3D volumes are supported");
    }
  }

  const Extents ext{static_cast<std::size_t>(h.dim[1]), static_cast<std::size_t>(h.dim[2]),
                    static_cast<std::size_t>(h.dim[3])};
  const std::size_t offset = static_cast<std::size_t>(h.vox_offset);
  if (!(h.vox_offset >= static_cast<float>(kVoxOffset)) || static_cast<float>(offset) != h.vox_offset) {
    throw Error(ErrorCode::Truncated, "vox_offset must be an integer >= 352");
  }
  const std::size_t bytes_per = static_cast<std::size_t>(h.bitpix) / 8;
  const std::size_t payload = ext.count() * bytes_per;
  if (bytes.size() < offset + payload) {
    throw Error(ErrorCode::Truncated, "payload holds " + std::to_string(bytes.size() - offset) +
                                          " bytes, expected " + std::to_string(payload));
  }

  Spacing spacing{};
  for (std::size_t i = 0; i < 3; ++i) {
    const float p = std::fabs(h.pixdim[i + 1]);
    spacing[i] = p > 0.0F && std::isfinite(p) ? static_cast<double>(p) : 1.0;
  }

  std::vector<float> data(ext.count());
  const Reader payload_reader(bytes.subspan(offset), h.little_endian);
  // Identity scaling is skipped so float32 payloads (including -0.0) stay bit-exact.
  const bool scale = h.scl_slope != 0.0F && std::isfinite(h.scl_slope) &&
                     !(h.scl_slope == 1.0F && h.scl_inter == 0.0F);
  const double slope = h.scl_slope;
  const double inter = h.scl_inter;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::size_t at = i * bytes_per;
    double x = 0.0;
    switch (h.datatype) {
      case kUint8: x = payload_reader.get<std::uint8_t>(at); break;
      case kInt16: x = payload_reader.get<std::int16_t>(at); break;
      case kInt32: x = payload_reader.get<std::int32_t>(at); break;
      case kFloat32: x = payload_reader.get<float>(at); break;
      case kFloat64: x = payload_reader.get<double>(at); break;
      default: break;
    }
    if (scale) x = slope * x + inter;
    data[i] = static_cast<float>(x);
  }

  Volume volume(ext, spacing, std::move(data));
  if (h.sform_code > 0) {
    Affine a{};
    for (std::size_t j = 0; j < 4; ++j) {
      a[0][j] = h.srow_x[j];
      a[1][j] = h.srow_y[j];
      a[2][j] = h.srow_z[j];
    }
    a[3] = {0.0, 0.0, 0.0, 1.0};
    volume.world_transform = a;
  }
  volume.validate(strict);
  return {h, std::move(volume)};
}

std::vector<std::uint8_t> write(const Volume& volume) {
  volume.validate(false);
  const Extents& e = volume.extents();
  for (std::size_t n : {e.nx, e.ny, e.nz}) {
    if (n > 32767) throw Error(ErrorCode::DimMismatch, "extent exceeds the NIfTI-1 int16 range");
  }
  std::vector<std::uint8_t> out(kVoxOffset + volume.size() * sizeof(float), 0);
  put_le<std::int32_t>(out, 0, kHeaderSize);
  const std::array<std::int16_t, 8> dim{3,
                                        static_cast<std::int16_t>(e.nx),
                                        static_cast<std::int16_t>(e.ny),
                                        static_cast<std::int16_t>(e.nz),
                                        1, 1, 1, 1};
  for (std::size_t i = 0; i < 8; ++i) put_le<std::int16_t>(out, kOffDim + 2 * i, dim[i]);
  put_le<std::int16_t>(out, kOffDatatype, kFloat32);
  put_le<std::int16_t>(out, kOffBitpix, 32);
  const Spacing& s = volume.voxel_size();
  const std::array<float, 8> pixdim{1.0F, static_cast<float>(s[0]), static_cast<float>(s[1]),
                                    static_cast<float>(s[2]), 1.0F, 1.0F, 1.0F, 1.0F};
  for (std::size_t i = 0; i < 8; ++i) put_le<float>(out, kOffPixdim + 4 * i, pixdim[i]);
  put_le<float>(out, kOffVoxOffset, static_cast<float>(kVoxOffset));
  put_le<float>(out, kOffSclSlope, 1.0F);
  put_le<float>(out, kOffSclInter, 0.0F);
  out[kOffXyztUnits] = 2;  // NIFTI_UNITS_MM
  if (volume.world_transform) {
    const Affine& a = *volume.world_transform;
    put_le<std::int16_t>(out, kOffSformCode, 1);
    for (std::size_t j = 0; j < 4; ++j) {
      put_le<float>(out, kOffSrowX + 4 * j, static_cast<float>(a[0][j]));
      put_le<float>(out, kOffSrowY + 4 * j, static_cast<float>(a[1][j]));
      put_le<float>(out, kOffSrowZ + 4 * j, static_cast<float>(a[2][j]));
    }
  }
  std::memcpy(out.data() + kOffMagic, "n+1\0", 4);
  std::span<const float> data = volume.data();
  for (std::size_t i = 0; i < data.size(); ++i) put_le<float>(out, kVoxOffset + 4 * i, data[i]);
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IoError, "short write to " + path.string());
}

Volume load(const std::filesystem::path& path, bool strict) {
  const auto ext = path.extension().string();
  if (ext == ".gz") throw Error(ErrorCode::BadMagic, "compressed NIfTI is not supported: " + path.string());
  return parse(read_file(path), strict).second;
}

void save(const Volume& volume, const std::filesystem::path& path) { write_file(path, write(volume)); }

}  // namespace szdl::nifti
