// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

// Training-time volume augmentation: blur, noise, rigid/elastic resampling,
// bias field and k-space motion. Every transform is pure; randomness comes
// only from the Rng passed in.

#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "json.hpp"
#include "szdl/common.hpp"
#include "szdl/volume.hpp"

namespace szdl {

struct AugmentSpec {
  double p_blur = 0.1;
  std::array<double, 2> blur_sigma_mm{0.25, 1.5};
  double p_noise = 0.6;
  std::array<double, 2> noise_std{0.0, 0.05};
  double p_spatial = 0.2;  // then affine or elastic with equal odds
  double max_rotation_deg = 10.0;
  double max_translation_mm = 5.0;
  double affine_scale = 1.0;
  std::size_t elastic_grid = 7;
  double max_elastic_mm = 4.0;
  double p_bias = 0.1;
  int bias_order = 3;
  double max_bias_coefficient = 0.3;
  double p_motion = 0.05;
  std::size_t max_motion_moves = 2;
  double max_motion_deg = 5.0;
  double max_motion_mm = 4.0;

  /// Throws BadProbability / InvalidArgument.
  void validate() const;
  /// All probabilities zero.
  static AugmentSpec none();
};

nlohmann::json to_json(const AugmentSpec& spec);
/// Strict: unknown keys raise ConfigError.
AugmentSpec augment_spec_from_json(const nlohmann::json& j);

/// Separable Gaussian, radius ceil(3 sigma / voxel) per axis, mirrored edges.
Volume blur(const Volume& v, double sigma_mm);

Volume add_noise(const Volume& v, double sd, Rng& rng);

/// Rotation (degrees, applied x then y then z) about the volume centre, then
/// translation in mm. Output samples the inverse-mapped source point.
struct RigidTransform {
  std::array<double, 3> rotation_deg{};
  std::array<double, 3> translation_mm{};
  bool is_identity() const;
};

/// Trilinear resampling under `t` (and isotropic `scale` about the centre);
/// out-of-field samples take the volume minimum.
Volume affine_resample(const Volume& v, const RigidTransform& t, double scale = 1.0);

/// Displacements (mm) on a grid^3 lattice spanning the volume, control point
/// (i, j, k) at linear index i + grid * (j + grid * k).
struct ElasticField {
  std::size_t grid = 7;
  std::vector<std::array<double, 3>> displacement_mm;
  bool is_zero() const;
};

ElasticField random_elastic_field(std::size_t grid, double max_mm, Rng& rng);
/// Output voxel p samples the input at p - d(p), d trilinear in the lattice.
Volume elastic_deform(const Volume& v, const ElasticField& field);

/// Monomials x^i y^j z^k with i + j + k <= order, enumerated i-major, then j, then k.
std::size_t bias_term_count(int order);
/// exp(P(x~)) with x~ in [-1, 1]^3 (voxel centres of the first/last index map to -1/+1).
double bias_polynomial(const std::vector<double>& coefficients, int order, double x, double y, double z);
Volume bias_field(const Volume& v, const std::vector<double>& coefficients, int order);

/// Segment i is resampled under transforms[i] and supplies the k-space lines
/// whose fftshifted index along `axis` lies in [bounds[i], bounds[i + 1]).
struct MotionSpec {
  std::vector<RigidTransform> transforms;
  std::size_t axis = 2;
  std::vector<std::size_t> bounds;  // transforms.size() + 1 entries, 0 ... n
};

MotionSpec random_motion(const Volume& v, const AugmentSpec& spec, Rng& rng);
Volume motion_artifact(const Volume& v, const MotionSpec& motion);

struct AppliedTransforms {
  bool blur = false;
  bool noise = false;
  bool affine = false;
  bool elastic = false;
  bool bias = false;
  bool motion = false;
};

struct AugmentResult {
  Volume volume;
  AppliedTransforms applied;
};

/// Blur, noise, one of {affine, elastic}, bias, motion, each gated by its probability.
AugmentResult apply_pipeline(const Volume& v, const AugmentSpec& spec, Rng& rng);

}  // namespace szdl
