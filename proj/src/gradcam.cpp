// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

#include "szdl/gradcam.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "szdl/nifti.hpp"
#include "szdl/ops.hpp"

namespace szdl {
namespace {

// Source coordinate and weight for each output index along one axis.
std::vector<std::pair<std::size_t, double>> axis_map(std::size_t in, std::size_t out) {
  std::vector<std::pair<std::size_t, double>> m;
  for (std::size_t i = 0; i < out; ++i) {
    double s = (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    const double fl = in > 1 ? std::min(std::floor(s), static_cast<double>(in - 2)) : 0.0;
    m.emplace_back(static_cast<std::size_t>(fl), s - fl);
  }
  return m;
}

void write_pgm(const std::filesystem::path& path, std::size_t w, std::size_t h, const std::vector<std::uint8_t>& px) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << "P5\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

}  // namespace

std::vector<double> class_activation(std::span<const double> features, std::span<const double> grads,
                                     std::size_t channels) {
  if (channels == 0 || features.size() != grads.size() || features.size() % channels != 0) {
    throw Error(ErrorCode::ShapeMismatch, "features and gradients must both be [C, S]");
  }
  const std::size_t s = features.size() / channels;
  std::vector<double> map(s, 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    double w = 0.0;
    for (std::size_t i = 0; i < s; ++i) w += grads[c * s + i];
    w /= static_cast<double>(s);
    for (std::size_t i = 0; i < s; ++i) map[i] += w * features[c * s + i];
  }
  for (double& v : map) v = std::max(0.0, v);
  return map;
}

std::vector<double> upsample_trilinear(const std::vector<double>& in, const Extents& from, const Extents& to) {
  if (in.size() != from.count()) throw Error(ErrorCode::ShapeMismatch, "upsample input size mismatch");
  const auto mx = axis_map(from.nx, to.nx);
  const auto my = axis_map(from.ny, to.ny);
  const auto mz = axis_map(from.nz, to.nz);
  auto at = [&](std::size_t x, std::size_t y, std::size_t z) {
    return in[std::min(x, from.nx - 1) + from.nx * (std::min(y, from.ny - 1) + from.ny * std::min(z, from.nz - 1))];
  };
  std::vector<double> out(to.count());
  for (std::size_t z = 0; z < to.nz; ++z) {
    const auto [z0, fz] = mz[z];
    for (std::size_t y = 0; y < to.ny; ++y) {
      const auto [y0, fy] = my[y];
      for (std::size_t x = 0; x < to.nx; ++x) {
        const auto [x0, fx] = mx[x];
        double acc = 0.0;
        for (std::size_t dz = 0; dz < 2; ++dz) {
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const double w = (dz ? fz : 1.0 - fz) * (dy ? fy : 1.0 - fy) * (dx ? fx : 1.0 - fx);
              if (w != 0.0) acc += w * at(x0 + dx, y0 + dy, z0 + dz);
            }
          }
        }
        out[x + to.nx * (y + to.ny * z)] = acc;
      }
    }
  }
  return out;
}

CamVolume normalize_cam(const std::vector<double>& raw, const Volume& grid) {
  if (raw.size() != grid.size()) throw Error(ErrorCode::ShapeMismatch, "CAM size does not match its grid");
  CamVolume cam;
  cam.values = Volume(grid.extents(), grid.voxel_size());
  cam.values.world_transform = grid.world_transform;
  const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
  cam.raw_min = *lo;
  cam.raw_max = *hi;
  auto out = cam.values.data();
  if (cam.raw_max <= 0.0) {
    cam.degenerate = true;
    return cam;
  }
  const double range = cam.raw_max - cam.raw_min;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    out[i] = range > 0.0 ? static_cast<float>((raw[i] - cam.raw_min) / range) : 1.0F;
  }
  return cam;
}

template <typename Real>
CamVolume grad_cam(Model<Real>& model, const Volume& volume, int target_class, CamScore score, FeatureTap tap) {
  if (target_class < 0 || static_cast<std::size_t>(target_class) >= model.config().num_classes) {
    throw Error(ErrorCode::BadLabel, "target class out of range");
  }
  Tape<Real> tape;
  ForwardOptions options;
  options.frozen_params = true;
  options.capture_features = true;
  options.tap = tap;
  const auto out = model.forward(tape, volume_to_tensor<Real>(volume), Mode::Eval, nullptr, options);
  const Tensor<Real>& head = score == CamScore::Logit ? out.logits : out.probabilities;
  const Tensor<Real> target = ops::select(tape, head, static_cast<std::size_t>(target_class));
  tape.backward(target);

  Tensor<Real> features = out.features;
  const std::size_t c = features.dim(1);
  const Extents coarse{features.dim(4), features.dim(3), features.dim(2)};
  std::vector<double> f(features.values().begin(), features.values().end());
  std::vector<double> g(features.size(), 0.0);
  if (features.has_grad()) {
    const auto gr = std::as_const(features).grad();
    std::copy(gr.begin(), gr.end(), g.begin());
  }
  const auto raw = class_activation(f, g, c);
  CamVolume cam = normalize_cam(upsample_trilinear(raw, coarse, volume.extents()), volume);
  cam.source_layer = tap == FeatureTap::ConvOutput ? "block5.conv2" : "block5.output";
  cam.target_class = target_class;
  return cam;
}

CamVolume average_cam(const std::vector<CamVolume>& cams) {
  if (cams.empty()) throw Error(ErrorCode::EmptyList, "average_cam needs at least one map");
  const Extents e = cams.front().values.extents();
  std::vector<double> mean(e.count(), 0.0);
  for (const auto& c : cams) {
    if (!(c.values.extents() == e)) throw Error(ErrorCode::MixedExtents, "CAMs have different extents");
    if (c.target_class != cams.front().target_class) {
      throw Error(ErrorCode::InvalidArgument, "CAMs target different classes");
    }
    const auto v = c.values.data();
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += static_cast<double>(v[i]);
  }
  for (double& m : mean) m /= static_cast<double>(cams.size());
  CamVolume avg = normalize_cam(mean, cams.front().values);
  avg.source_layer = cams.front().source_layer;
  avg.target_class = cams.front().target_class;
  return avg;
}

std::vector<std::uint8_t> threshold_cam(const CamVolume& cam, double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw Error(ErrorCode::InvalidArgument, "threshold must be in [0, 1]");
  std::vector<std::uint8_t> mask;
  mask.reserve(cam.values.size());
  for (float v : cam.values.data()) mask.push_back(static_cast<double>(v) >= threshold ? 1 : 0);
  return mask;
}

double localization_score(const CamVolume& cam, const std::vector<std::uint8_t>& roi, double threshold) {
  if (roi.size() != cam.values.size()) throw Error(ErrorCode::ShapeMismatch, "ROI does not match the CAM grid");
  const auto mask = threshold_cam(cam, threshold);
  std::size_t supra = 0, inside = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    ++supra;
    if (roi[i]) ++inside;
  }
  return supra == 0 ? 0.0 : static_cast<double>(inside) / static_cast<double>(supra);
}

void export_cam(const CamVolume& cam, const std::filesystem::path& path) { nifti::save(cam.values, path); }

void write_mid_slices(const Volume& v, const std::filesystem::path& prefix) {
  const Extents e = v.extents();
  const float lo = v.min_value();
  const float hi = v.max_value();
  auto gray = [&](float x) {
    const float t = hi > lo ? (x - lo) / (hi - lo) : 0.0F;
    return static_cast<std::uint8_t>(std::lround(255.0F * std::clamp(t, 0.0F, 1.0F)));
  };
  std::vector<std::uint8_t> px;
  for (std::size_t y = e.ny; y-- > 0;) {
    for (std::size_t x = 0; x < e.nx; ++x) px.push_back(gray(v.at(x, y, e.nz / 2)));
  }
  write_pgm(prefix.string() + "_axial.pgm", e.nx, e.ny, px);
  px.clear();
  for (std::size_t z = e.nz; z-- > 0;) {
    for (std::size_t x = 0; x < e.nx; ++x) px.push_back(gray(v.at(x, e.ny / 2, z)));
  }
  write_pgm(prefix.string() + "_coronal.pgm", e.nx, e.nz, px);
  px.clear();
  for (std::size_t z = e.nz; z-- > 0;) {
    for (std::size_t y = 0; y < e.ny; ++y) px.push_back(gray(v.at(e.nx / 2, y, z)));
  }
  write_pgm(prefix.string() + "_sagittal.pgm", e.ny, e.nz, px);
}

template CamVolume grad_cam(Model<float>&, const Volume&, int, CamScore, FeatureTap);
template CamVolume grad_cam(Model<double>&, const Volume&, int, CamScore, FeatureTap);

}  // namespace szdl
