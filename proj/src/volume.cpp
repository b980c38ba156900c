// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

#include "szdl/volume.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "szdl/common.hpp"

namespace szdl {

Volume::Volume(Extents extents, Spacing voxel_size, float fill)
    : extents_(extents), voxel_size_(voxel_size), data_(extents.count(), fill) {
  validate(false);
}

Volume::Volume(Extents extents, Spacing voxel_size, std::vector<float> data)
    : extents_(extents), voxel_size_(voxel_size), data_(std::move(data)) {
  validate(false);
}

float Volume::min_value() const {
  return data_.empty() ? 0.0F : *std::min_element(data_.begin(), data_.end());
}

float Volume::max_value() const {
  return data_.empty() ? 0.0F : *std::max_element(data_.begin(), data_.end());
}

void Volume::validate(bool require_finite) const {
  if (extents_.nx == 0 || extents_.ny == 0 || extents_.nz == 0) {
    throw Error(ErrorCode::DimMismatch, "volume extents must be positive");
  }
  if (data_.size() != extents_.count()) {
    throw Error(ErrorCode::DimMismatch, "data length " + std::to_string(data_.size()) +
                                            " != nx*ny*nz " + std::to_string(extents_.count()));
  }
  for (double s : voxel_size_) {
    if (!(s > 0.0) || !std::isfinite(s)) {
      throw Error(ErrorCode::InvalidArgument, "voxel size components must be positive");
    }
  }
  if (require_finite) {
    for (float v : data_) {
      if (!std::isfinite(v)) throw Error(ErrorCode::NonFiniteValue, "volume holds NaN/Inf");
    }
  }
}

}  // namespace szdl
