// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace szdl {

struct Extents {
  std::size_t nx = 0;
  std::size_t ny = 0;
  std::size_t nz = 0;

  std::size_t count() const { return nx * ny * nz; }
  std::size_t operator[](std::size_t axis) const { return axis == 0 ? nx : (axis == 1 ? ny : nz); }
  friend bool operator==(const Extents&, const Extents&) = default;
};

using Spacing = std::array<double, 3>;
using Affine = std::array<std::array<double, 4>, 4>;

/// A 3D scalar field. Voxel (x, y, z) lives at linear index x + nx * (y + ny * z),
/// i.e. row-major over [z][y][x], which is also the NIfTI payload order.
class Volume {
 public:
  Volume() = default;
  Volume(Extents extents, Spacing voxel_size, float fill = 0.0F);
  Volume(Extents extents, Spacing voxel_size, std::vector<float> data);

  const Extents& extents() const { return extents_; }
  const Spacing& voxel_size() const { return voxel_size_; }
  std::size_t size() const { return data_.size(); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  std::vector<float>& storage() { return data_; }

  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return x + extents_.nx * (y + extents_.ny * z);
  }
  float& at(std::size_t x, std::size_t y, std::size_t z) { return data_[index(x, y, z)]; }
  float at(std::size_t x, std::size_t y, std::size_t z) const { return data_[index(x, y, z)]; }

  float min_value() const;
  float max_value() const;

  std::optional<Affine> world_transform;

  /// Throws DimMismatch / InvalidArgument / NonFiniteValue on violated invariants.
  void validate(bool require_finite = true) const;

 private:
  Extents extents_;
  Spacing voxel_size_{1.0, 1.0, 1.0};
  std::vector<float> data_;
};

}  // namespace szdl
