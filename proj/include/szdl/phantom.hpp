// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic brain phantoms: a bright ellipsoid with two mirrored dark central
// cavities whose radii grow with the class label. Stands in for the gated
// clinical scans so the whole pipeline can be exercised end to end.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "szdl/manifest.hpp"
#include "szdl/volume.hpp"

namespace szdl {

struct PhantomSpec {
  std::size_t size = 48;
  double effect_size = 0.5;  // relative enlargement of class-1 cavities
  double noise_std = 0.05;
  std::uint64_t seed = 0;

  void validate() const;  // SizeTooSmall for size < 16, InvalidArgument for negatives
};

/// Field of view is fixed at 192 mm, so voxel size is 192 / size mm.
double phantom_voxel_mm(std::size_t size);

struct Ellipsoid {
  std::array<double, 3> center{};  // normalized coordinates in [-1, 1]
  std::array<double, 3> radii{};
};

/// Per-subject geometry drawn from the seed. The label only scales the cavities.
struct PhantomGeometry {
  Ellipsoid brain;
  std::array<Ellipsoid, 2> cavities;
  std::array<double, 3> texture_phase{};
};

PhantomGeometry phantom_geometry(const PhantomSpec& spec, int label);

Volume generate_phantom(const PhantomSpec& spec, int label);

/// Union of both cavities, grown by `dilation_voxels`, as a 0/1 mask on the phantom grid.
std::vector<std::uint8_t> phantom_cavity_mask(const PhantomSpec& spec, int label, double dilation_voxels);

/// The central box |u| <= 0.5 (normalized coordinates) that encloses both cavities.
std::vector<std::uint8_t> central_region_mask(std::size_t size);

struct SynthOptions {
  std::size_t count_per_class = 5;
  PhantomSpec phantom;  // phantom.seed is the dataset seed
  Site site = Site::SYNTH;
  std::string id_prefix = "sub";
};

/// Subject i of label l gets seed derive_seed(dataset seed, {l, i}).
PhantomSpec subject_phantom_spec(const SynthOptions& options, int label, std::size_t index);

/// Manifest for a synthetic dataset, without touching the filesystem.
DatasetManifest synth_manifest(const SynthOptions& options);

/// Writes one .nii per subject under out_dir plus manifest.json; returns the manifest.
DatasetManifest synthesize_dataset(const SynthOptions& options, const std::filesystem::path& out_dir);

}  // namespace szdl
