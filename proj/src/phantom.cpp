// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

#include "szdl/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "szdl/common.hpp"
#include "szdl/nifti.hpp"

namespace szdl {
namespace {

constexpr double kFieldOfViewMm = 192.0;
constexpr float kCavityIntensity = 0.08F;
constexpr double kTissueIntensity = 0.72;
constexpr double kTextureAmplitude = 0.06;

double normalized(std::size_t i, std::size_t n) {
  const double half = 0.5 * static_cast<double>(n);
  return (static_cast<double>(i) + 0.5 - half) / half;
}

double ellipsoid_level(const Ellipsoid& e, double ux, double uy, double uz, double grow = 0.0) {
  const double dx = (ux - e.center[0]) / (e.radii[0] + grow);
  const double dy = (uy - e.center[1]) / (e.radii[1] + grow);
  const double dz = (uz - e.center[2]) / (e.radii[2] + grow);
  return dx * dx + dy * dy + dz * dz;
}

}  // namespace

void PhantomSpec::validate() const {
  if (size < 16) throw Error(ErrorCode::SizeTooSmall, "phantom size must be >= 16");
  if (!(effect_size >= 0.0) || !(noise_std >= 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "effect_size and noise_std must be non-negative");
  }
}

double phantom_voxel_mm(std::size_t size) { return kFieldOfViewMm / static_cast<double>(size); }

PhantomGeometry phantom_geometry(const PhantomSpec& spec, int label) {
  spec.validate();
  Rng rng(spec.seed);
  std::uniform_real_distribution<double> jitter(-1.0, 1.0);
  PhantomGeometry g;

  g.brain.radii = {0.80 * (1.0 + 0.05 * jitter(rng)), 0.88 * (1.0 + 0.05 * jitter(rng)),
                   0.72 * (1.0 + 0.05 * jitter(rng))};
  g.brain.center = {0.03 * jitter(rng), 0.03 * jitter(rng), 0.03 * jitter(rng)};

  const double base_radius = 0.10 * (1.0 + 0.10 * jitter(rng));
  const double separation = 0.17 * (1.0 + 0.10 * jitter(rng));
  const double cy = 0.03 * jitter(rng);
  const double cz = 0.05 + 0.03 * jitter(rng);
  const double scale = 1.0 + spec.effect_size * static_cast<double>(label);
  const std::array<double, 3> shape{0.75, 1.5, 1.0};
  for (std::size_t k = 0; k < 2; ++k) {
    const double side = k == 0 ? -1.0 : 1.0;
    g.cavities[k].center = {g.brain.center[0] + side * separation, g.brain.center[1] + cy,
                            g.brain.center[2] + cz};
    for (std::size_t a = 0; a < 3; ++a) g.cavities[k].radii[a] = base_radius * shape[a] * scale;
  }
  for (double& phase : g.texture_phase) phase = std::numbers::pi * jitter(rng);
  return g;
}

Volume generate_phantom(const PhantomSpec& spec, int label) {
  if (label != 0 && label != 1) throw Error(ErrorCode::BadLabel, "phantom label must be 0 or 1");
  const PhantomGeometry g = phantom_geometry(spec, label);
  const std::size_t n = spec.size;
  const double mm = phantom_voxel_mm(n);
  Volume v(Extents{n, n, n}, Spacing{mm, mm, mm});

  // Noise uses its own stream so it does not depend on the geometry draws.
  Rng noise_rng(derive_seed(spec.seed, {0x4015eULL}));
  std::normal_distribution<double> noise(0.0, 1.0);

  for (std::size_t z = 0; z < n; ++z) {
    const double uz = normalized(z, n);
    for (std::size_t y = 0; y < n; ++y) {
      const double uy = normalized(y, n);
      for (std::size_t x = 0; x < n; ++x) {
        const double ux = normalized(x, n);
        double value = 0.0;
        if (ellipsoid_level(g.brain, ux, uy, uz) <= 1.0) {
          if (ellipsoid_level(g.cavities[0], ux, uy, uz) <= 1.0 ||
              ellipsoid_level(g.cavities[1], ux, uy, uz) <= 1.0) {
            value = kCavityIntensity;
          } else {
            const double texture = (std::sin(3.0 * ux + g.texture_phase[0]) +
                                    std::sin(3.0 * uy + g.texture_phase[1]) +
                                    std::sin(3.0 * uz + g.texture_phase[2])) /
                                   3.0;
            value = kTissueIntensity + kTextureAmplitude * texture;
          }
        }
        if (spec.noise_std > 0.0) value += spec.noise_std * noise(noise_rng);
        v.at(x, y, z) = static_cast<float>(std::clamp(value, 0.0, 1.0));
      }
    }
  }
  return v;
}

std::vector<std::uint8_t> phantom_cavity_mask(const PhantomSpec& spec, int label, double dilation_voxels) {
  const PhantomGeometry g = phantom_geometry(spec, label);
  const std::size_t n = spec.size;
  const double grow = dilation_voxels / (0.5 * static_cast<double>(n));
  std::vector<std::uint8_t> mask(n * n * n, 0);
  for (std::size_t z = 0; z < n; ++z) {
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        const double ux = normalized(x, n);
        const double uy = normalized(y, n);
        const double uz = normalized(z, n);
        const bool inside = ellipsoid_level(g.cavities[0], ux, uy, uz, grow) <= 1.0 ||
                            ellipsoid_level(g.cavities[1], ux, uy, uz, grow) <= 1.0;
        mask[x + n * (y + n * z)] = inside ? 1 : 0;
      }
    }
  }
  return mask;
}

std::vector<std::uint8_t> central_region_mask(std::size_t size) {
  std::vector<std::uint8_t> mask(size * size * size, 0);
  for (std::size_t z = 0; z < size; ++z) {
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const bool inside = std::fabs(normalized(x, size)) <= 0.5 && std::fabs(normalized(y, size)) <= 0.5 &&
                            std::fabs(normalized(z, size)) <= 0.5;
        mask[x + size * (y + size * z)] = inside ? 1 : 0;
      }
    }
  }
  return mask;
}

PhantomSpec subject_phantom_spec(const SynthOptions& options, int label, std::size_t index) {
  PhantomSpec spec = options.phantom;
  spec.seed = derive_seed(options.phantom.seed, {static_cast<std::uint64_t>(label), index});
  return spec;
}

DatasetManifest synth_manifest(const SynthOptions& options) {
  options.phantom.validate();
  DatasetManifest m;
  for (int label = 0; label < 2; ++label) {
    for (std::size_t i = 0; i < options.count_per_class; ++i) {
      char id[64];
      std::snprintf(id, sizeof(id), "%s-%s-L%d-%04zu", options.id_prefix.c_str(),
                    std::string(to_string(options.site)).c_str(), label, i);
      ManifestRecord r;
      r.subject_id = id;
      r.scan_path = std::string(id) + ".nii";
      r.label = label;
      r.site = options.site;
      m.records.push_back(std::move(r));
    }
  }
  return m;
}

DatasetManifest synthesize_dataset(const SynthOptions& options, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + out_dir.string() + ": " + ec.message());
  DatasetManifest m = synth_manifest(options);
  std::size_t next = 0;
  for (int label = 0; label < 2; ++label) {
    for (std::size_t i = 0; i < options.count_per_class; ++i) {
      const auto& r = m.records[next++];
      nifti::save(generate_phantom(subject_phantom_spec(options, label, i), label), out_dir / r.scan_path);
    }
  }
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

}  // namespace szdl
