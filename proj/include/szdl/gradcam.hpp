// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

// 3D Grad-CAM on the last convolution unit, plus averaging, thresholding and
// ROI scoring.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "szdl/model.hpp"
#include "szdl/volume.hpp"

namespace szdl {

struct CamVolume {
  Volume values;  // in [0, 1] on the input grid
  std::string source_layer;
  int target_class = 1;
  double raw_min = 0.0;  // before min-max normalization
  double raw_max = 0.0;
  bool degenerate = false;  // all-zero raw map
};

enum class CamScore { Logit, Probability };

/// Raw map ReLU(sum_k w_k f_k) with w_k the spatial mean of grad_k.
/// features and grads are [C, S] flattened (channel-major); returns S values.
std::vector<double> class_activation(std::span<const double> features, std::span<const double> grads,
                                     std::size_t channels);

/// Trilinear resize with half-voxel-centred sampling (edges clamped).
/// Extents are {nx, ny, nz}; data index x + nx * (y + ny * z).
std::vector<double> upsample_trilinear(const std::vector<double>& in, const Extents& from, const Extents& to);

/// Min-max normalizes `raw` into a CamVolume on `grid` (an all-zero map stays
/// zero and sets `degenerate`).
CamVolume normalize_cam(const std::vector<double>& raw, const Volume& grid);

/// Eval-mode forward, backward of the target-class score to the tapped
/// feature maps (the last conv layer by default), upsample to the volume grid,
/// normalize. Mutates no model state.
template <typename Real>
CamVolume grad_cam(Model<Real>& model, const Volume& volume, int target_class, CamScore score = CamScore::Logit,
                   FeatureTap tap = FeatureTap::ConvOutput);

/// Voxelwise mean, re-normalized. Throws EmptyList / MixedExtents.
CamVolume average_cam(const std::vector<CamVolume>& cams);

/// 1 where value >= threshold. Threshold outside [0, 1] raises InvalidArgument.
std::vector<std::uint8_t> threshold_cam(const CamVolume& cam, double threshold = 0.85);

/// Fraction of suprathreshold voxels inside `roi`; 0 when none is suprathreshold.
double localization_score(const CamVolume& cam, const std::vector<std::uint8_t>& roi, double threshold = 0.85);

void export_cam(const CamVolume& cam, const std::filesystem::path& path);

/// Writes <prefix>_axial.pgm, _coronal.pgm, _sagittal.pgm through the volume centre.
void write_mid_slices(const Volume& v, const std::filesystem::path& prefix);

}  // namespace szdl
