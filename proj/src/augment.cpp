// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

#include "szdl/augment.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <mutex>
#include <numbers>
#include <random>

namespace szdl {
namespace {

constexpr double kSnap = 1e-9;

std::size_t mirror(std::ptrdiff_t i, std::size_t n) {
  const auto period = static_cast<std::ptrdiff_t>(2 * n);
  std::ptrdiff_t m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < static_cast<std::ptrdiff_t>(n) ? m : period - 1 - m);
}

double uniform(Rng& rng, double lo, double hi) {
  if (hi <= lo) return lo;
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double snap(double s) {
  const double r = std::round(s);
  return std::fabs(s - r) < kSnap ? r : s;
}

// Trilinear sample at voxel coordinates; `background` outside [0, n-1].
class Sampler {
 public:
  Sampler(const Volume& v, float background) : v_(v), e_(v.extents()), background_(background) {}

  float at(double sx, double sy, double sz) const {
    std::array<std::size_t, 3> i0{};
    std::array<double, 3> f{};
    const std::array<double, 3> s{snap(sx), snap(sy), snap(sz)};
    for (std::size_t a = 0; a < 3; ++a) {
      const auto n = static_cast<double>(e_[a]);
      if (!(s[a] >= 0.0 && s[a] <= n - 1.0)) return background_;
      if (e_[a] == 1) {
        i0[a] = 0;
        f[a] = 0.0;
        continue;
      }
      const double fl = std::min(std::floor(s[a]), n - 2.0);
      i0[a] = static_cast<std::size_t>(fl);
      f[a] = s[a] - fl;
    }
    double acc = 0.0;
    for (std::size_t dz = 0; dz < 2; ++dz) {
      const double wz = dz == 0 ? 1.0 - f[2] : f[2];
      if (wz == 0.0) continue;
      for (std::size_t dy = 0; dy < 2; ++dy) {
        const double wy = dy == 0 ? 1.0 - f[1] : f[1];
        if (wy == 0.0) continue;
        for (std::size_t dx = 0; dx < 2; ++dx) {
          const double wx = dx == 0 ? 1.0 - f[0] : f[0];
          if (wx == 0.0) continue;
          acc += wz * wy * wx * static_cast<double>(v_.at(i0[0] + dx, i0[1] + dy, i0[2] + dz));
        }
      }
    }
    return static_cast<float>(acc);
  }

 private:
  const Volume& v_;
  Extents e_;
  float background_;
};

using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 rotation_matrix(const std::array<double, 3>& deg) {
  const double a = deg[0] * std::numbers::pi / 180.0;
  const double b = deg[1] * std::numbers::pi / 180.0;
  const double c = deg[2] * std::numbers::pi / 180.0;
  const Mat3 rx{{{1, 0, 0}, {0, std::cos(a), -std::sin(a)}, {0, std::sin(a), std::cos(a)}}};
  const Mat3 ry{{{std::cos(b), 0, std::sin(b)}, {0, 1, 0}, {-std::sin(b), 0, std::cos(b)}}};
  const Mat3 rz{{{std::cos(c), -std::sin(c), 0}, {std::sin(c), std::cos(c), 0}, {0, 0, 1}}};
  auto mul = [](const Mat3& p, const Mat3& q) {
    Mat3 r{};
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        for (int k = 0; k < 3; ++k) r[i][j] += p[i][k] * q[k][j];
      }
    }
    return r;
  };
  return mul(rz, mul(ry, rx));
}

std::mutex& fftw_plan_mutex() {
  static std::mutex m;
  return m;
}

void check_probability(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorCode::BadProbability, std::string(name) + " must be in [0, 1]");
}

void check_range(const std::array<double, 2>& r, const char* name) {
  if (!(r[0] >= 0.0 && r[1] >= r[0])) throw Error(ErrorCode::InvalidArgument, std::string(name) + " must be 0 <= lo <= hi");
}

}  // namespace

void AugmentSpec::validate() const {
  check_probability(p_blur, "p_blur");
  check_probability(p_noise, "p_noise");
  check_probability(p_spatial, "p_spatial");
  check_probability(p_bias, "p_bias");
  check_probability(p_motion, "p_motion");
  check_range(blur_sigma_mm, "blur_sigma_mm");
  check_range(noise_std, "noise_std");
  for (double x : {max_rotation_deg, max_translation_mm, max_elastic_mm, max_bias_coefficient, max_motion_deg,
                   max_motion_mm}) {
    if (!(x >= 0.0)) throw Error(ErrorCode::InvalidArgument, "augmentation magnitudes must be non-negative");
  }
  if (affine_scale != 1.0) throw Error(ErrorCode::InvalidArgument, "affine_scale is fixed at 1");
  if (elastic_grid < 2) throw Error(ErrorCode::InvalidArgument, "elastic_grid must be >= 2");
  if (bias_order < 0 || bias_order > 3) throw Error(ErrorCode::InvalidArgument, "bias_order must be in [0, 3]");
  if (max_motion_moves < 1) throw Error(ErrorCode::InvalidArgument, "max_motion_moves must be >= 1");
}

AugmentSpec AugmentSpec::none() {
  AugmentSpec s;
  s.p_blur = s.p_noise = s.p_spatial = s.p_bias = s.p_motion = 0.0;
  return s;
}

nlohmann::json to_json(const AugmentSpec& s) {
  return nlohmann::json{
      {"p_blur", s.p_blur},
      {"blur_sigma_mm", s.blur_sigma_mm},
      {"p_noise", s.p_noise},
      {"noise_std", s.noise_std},
      {"p_spatial", s.p_spatial},
      {"max_rotation_deg", s.max_rotation_deg},
      {"max_translation_mm", s.max_translation_mm},
      {"affine_scale", s.affine_scale},
      {"elastic_grid", s.elastic_grid},
      {"max_elastic_mm", s.max_elastic_mm},
      {"p_bias", s.p_bias},
      {"bias_order", s.bias_order},
      {"max_bias_coefficient", s.max_bias_coefficient},
      {"p_motion", s.p_motion},
      {"max_motion_moves", s.max_motion_moves},
      {"max_motion_deg", s.max_motion_deg},
      {"max_motion_mm", s.max_motion_mm},
  };
}

AugmentSpec augment_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorCode::ConfigError, "augment spec must be an object");
  AugmentSpec s;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "p_blur") s.p_blur = v.get<double>();
      else if (key == "blur_sigma_mm") s.blur_sigma_mm = v.get<std::array<double, 2>>();
      else if (key == "p_noise") s.p_noise = v.get<double>();
      else if (key == "noise_std") s.noise_std = v.get<std::array<double, 2>>();
      else if (key == "p_spatial") s.p_spatial = v.get<double>();
      else if (key == "max_rotation_deg") s.max_rotation_deg = v.get<double>();
      else if (key == "max_translation_mm") s.max_translation_mm = v.get<double>();
      else if (key == "affine_scale") s.affine_scale = v.get<double>();
      else if (key == "elastic_grid") s.elastic_grid = v.get<std::size_t>();
      else if (key == "max_elastic_mm") s.max_elastic_mm = v.get<double>();
      else if (key == "p_bias") s.p_bias = v.get<double>();
      else if (key == "bias_order") s.bias_order = v.get<int>();
      else if (key == "max_bias_coefficient") s.max_bias_coefficient = v.get<double>();
      else if (key == "p_motion") s.p_motion = v.get<double>();
      else if (key == "max_motion_moves") s.max_motion_moves = v.get<std::size_t>();
      else if (key == "max_motion_deg") s.max_motion_deg = v.get<double>();
      else if (key == "max_motion_mm") s.max_motion_mm = v.get<double>();
      else throw Error(ErrorCode::ConfigError, "unknown augment key \"" + key + "\"");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("augment spec: ") + e.what());
  }
  return s;
}

Volume blur(const Volume& v, double sigma_mm) {
  if (!(sigma_mm >= 0.0)) throw Error(ErrorCode::InvalidArgument, "blur sigma must be >= 0");
  if (sigma_mm == 0.0) return v;
  const Extents e = v.extents();
  std::vector<double> cur(v.data().begin(), v.data().end());
  std::vector<double> next(cur.size());
  const std::array<std::size_t, 3> stride{1, e.nx, e.nx * e.ny};
  for (std::size_t axis = 0; axis < 3; ++axis) {
    const double sigma = sigma_mm / v.voxel_size()[axis];
    const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
    std::vector<double> w(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
      const double x = static_cast<double>(k);
      w[static_cast<std::size_t>(k + radius)] = std::exp(-x * x / (2.0 * sigma * sigma));
      total += w[static_cast<std::size_t>(k + radius)];
    }
    for (double& x : w) x /= total;
    const std::size_t n = e[axis];
    const std::size_t s = stride[axis];
    for (std::size_t base = 0; base < cur.size(); ++base) {
      const std::size_t coord = (base / s) % n;
      const std::size_t line = base - coord * s;
      double acc = 0.0;
      for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
        acc += w[static_cast<std::size_t>(k + radius)] *
               cur[line + mirror(static_cast<std::ptrdiff_t>(coord) + k, n) * s];
      }
      next[base] = acc;
    }
    std::swap(cur, next);
  }
  Volume out = v;
  auto d = out.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<float>(cur[i]);
  return out;
}

Volume add_noise(const Volume& v, double sd, Rng& rng) {
  if (!(sd >= 0.0)) throw Error(ErrorCode::InvalidArgument, "noise std must be >= 0");
  if (sd == 0.0) return v;
  Volume out = v;
  std::normal_distribution<double> n(0.0, sd);
  for (float& x : out.data()) x = static_cast<float>(static_cast<double>(x) + n(rng));
  return out;
}

bool RigidTransform::is_identity() const {
  return std::all_of(rotation_deg.begin(), rotation_deg.end(), [](double x) { return x == 0.0; }) &&
         std::all_of(translation_mm.begin(), translation_mm.end(), [](double x) { return x == 0.0; });
}

Volume affine_resample(const Volume& v, const RigidTransform& t, double scale) {
  if (!(scale > 0.0)) throw Error(ErrorCode::InvalidArgument, "scale must be positive");
  if (t.is_identity() && scale == 1.0) return v;
  const Extents e = v.extents();
  const Spacing sp = v.voxel_size();
  const Mat3 r = rotation_matrix(t.rotation_deg);
  std::array<double, 3> c{};
  for (std::size_t a = 0; a < 3; ++a) c[a] = 0.5 * static_cast<double>(e[a] - 1) * sp[a];
  Sampler sampler(v, v.min_value());
  Volume out(e, sp);
  out.world_transform = v.world_transform;
  for (std::size_t z = 0; z < e.nz; ++z) {
    for (std::size_t y = 0; y < e.ny; ++y) {
      for (std::size_t x = 0; x < e.nx; ++x) {
        const std::array<double, 3> q{static_cast<double>(x) * sp[0] - c[0] - t.translation_mm[0],
                                      static_cast<double>(y) * sp[1] - c[1] - t.translation_mm[1],
                                      static_cast<double>(z) * sp[2] - c[2] - t.translation_mm[2]};
        std::array<double, 3> s{};
        for (std::size_t a = 0; a < 3; ++a) {
          // R^T q / scale, back to voxel units.
          const double m = (r[0][a] * q[0] + r[1][a] * q[1] + r[2][a] * q[2]) / scale;
          s[a] = (m + c[a]) / sp[a];
        }
        out.at(x, y, z) = sampler.at(s[0], s[1], s[2]);
      }
    }
  }
  return out;
}

bool ElasticField::is_zero() const {
  return std::all_of(displacement_mm.begin(), displacement_mm.end(),
                     [](const std::array<double, 3>& d) { return d[0] == 0.0 && d[1] == 0.0 && d[2] == 0.0; });
}

ElasticField random_elastic_field(std::size_t grid, double max_mm, Rng& rng) {
  ElasticField f;
  f.grid = grid;
  f.displacement_mm.resize(grid * grid * grid);
  for (auto& d : f.displacement_mm) {
    for (double& x : d) x = uniform(rng, -max_mm, max_mm);
  }
  return f;
}

Volume elastic_deform(const Volume& v, const ElasticField& field) {
  const std::size_t g = field.grid;
  if (g < 2 || field.displacement_mm.size() != g * g * g) {
    throw Error(ErrorCode::InvalidArgument, "elastic field needs grid^3 displacements with grid >= 2");
  }
  if (field.is_zero()) return v;
  const Extents e = v.extents();
  const Spacing sp = v.voxel_size();
  // Per axis: control-lattice cell and weight for every voxel coordinate.
  std::array<std::vector<std::pair<std::size_t, double>>, 3> lattice;
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t i = 0; i < e[a]; ++i) {
      const double u = e[a] > 1 ? static_cast<double>(i) * static_cast<double>(g - 1) / static_cast<double>(e[a] - 1) : 0.0;
      const double fl = std::min(std::floor(u), static_cast<double>(g - 2));
      lattice[a].emplace_back(static_cast<std::size_t>(fl), u - fl);
    }
  }
  Sampler sampler(v, v.min_value());
  Volume out(e, sp);
  out.world_transform = v.world_transform;
  for (std::size_t z = 0; z < e.nz; ++z) {
    const auto [kz, fz] = lattice[2][z];
    for (std::size_t y = 0; y < e.ny; ++y) {
      const auto [ky, fy] = lattice[1][y];
      for (std::size_t x = 0; x < e.nx; ++x) {
        const auto [kx, fx] = lattice[0][x];
        std::array<double, 3> d{};
        for (std::size_t dz = 0; dz < 2; ++dz) {
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const double w = (dz ? fz : 1.0 - fz) * (dy ? fy : 1.0 - fy) * (dx ? fx : 1.0 - fx);
              if (w == 0.0) continue;
              const auto& c = field.displacement_mm[(kx + dx) + g * ((ky + dy) + g * (kz + dz))];
              for (std::size_t a = 0; a < 3; ++a) d[a] += w * c[a];
            }
          }
        }
        out.at(x, y, z) = sampler.at(static_cast<double>(x) - d[0] / sp[0], static_cast<double>(y) - d[1] / sp[1],
                                     static_cast<double>(z) - d[2] / sp[2]);
      }
    }
  }
  return out;
}

std::size_t bias_term_count(int order) {
  const auto n = static_cast<std::size_t>(order);
  return (n + 1) * (n + 2) * (n + 3) / 6;
}

double bias_polynomial(const std::vector<double>& coefficients, int order, double x, double y, double z) {
  if (coefficients.size() != bias_term_count(order)) {
    throw Error(ErrorCode::InvalidArgument, "bias field needs " + std::to_string(bias_term_count(order)) +
                                                " coefficients for order " + std::to_string(order));
  }
  double p = 0.0;
  std::size_t t = 0;
  for (int i = 0; i <= order; ++i) {
    for (int j = 0; j <= order - i; ++j) {
      for (int k = 0; k <= order - i - j; ++k) {
        p += coefficients[t++] * std::pow(x, i) * std::pow(y, j) * std::pow(z, k);
      }
    }
  }
  return p;
}

Volume bias_field(const Volume& v, const std::vector<double>& coefficients, int order) {
  if (order < 0 || order > 3) throw Error(ErrorCode::InvalidArgument, "bias order must be in [0, 3]");
  if (coefficients.size() != bias_term_count(order)) {
    throw Error(ErrorCode::InvalidArgument, "wrong bias coefficient count");
  }
  if (std::all_of(coefficients.begin(), coefficients.end(), [](double c) { return c == 0.0; })) return v;
  const Extents e = v.extents();
  auto norm = [](std::size_t i, std::size_t n) {
    return n > 1 ? 2.0 * static_cast<double>(i) / static_cast<double>(n - 1) - 1.0 : 0.0;
  };
  Volume out = v;
  for (std::size_t z = 0; z < e.nz; ++z) {
    for (std::size_t y = 0; y < e.ny; ++y) {
      for (std::size_t x = 0; x < e.nx; ++x) {
        const double p = bias_polynomial(coefficients, order, norm(x, e.nx), norm(y, e.ny), norm(z, e.nz));
        out.at(x, y, z) = static_cast<float>(static_cast<double>(v.at(x, y, z)) * std::exp(p));
      }
    }
  }
  return out;
}

MotionSpec random_motion(const Volume& v, const AugmentSpec& spec, Rng& rng) {
  MotionSpec m;
  m.axis = std::uniform_int_distribution<std::size_t>(0, 2)(rng);
  const std::size_t n = v.extents()[m.axis];
  std::size_t moves = std::uniform_int_distribution<std::size_t>(1, spec.max_motion_moves)(rng);
  moves = std::min(moves, n > 0 ? n - 1 : 0);
  m.transforms.push_back(RigidTransform{});
  for (std::size_t i = 0; i < moves; ++i) {
    RigidTransform t;
    for (double& a : t.rotation_deg) a = uniform(rng, -spec.max_motion_deg, spec.max_motion_deg);
    for (double& d : t.translation_mm) d = uniform(rng, -spec.max_motion_mm, spec.max_motion_mm);
    m.transforms.push_back(t);
  }
  // Distinct interior cut points.
  std::vector<std::size_t> cuts;
  for (std::size_t i = 1; i < n; ++i) cuts.push_back(i);
  std::shuffle(cuts.begin(), cuts.end(), rng);
  cuts.resize(moves);
  std::sort(cuts.begin(), cuts.end());
  m.bounds.push_back(0);
  m.bounds.insert(m.bounds.end(), cuts.begin(), cuts.end());
  m.bounds.push_back(n);
  return m;
}

Volume motion_artifact(const Volume& v, const MotionSpec& motion) {
  const std::size_t segments = motion.transforms.size();
  if (segments == 0) throw Error(ErrorCode::InvalidArgument, "motion needs at least one transform");
  if (motion.axis > 2) throw Error(ErrorCode::InvalidArgument, "motion axis must be 0, 1 or 2");
  const Extents e = v.extents();
  const std::size_t n_axis = e[motion.axis];
  if (motion.bounds.size() != segments + 1 || motion.bounds.front() != 0 || motion.bounds.back() != n_axis ||
      !std::is_sorted(motion.bounds.begin(), motion.bounds.end())) {
    throw Error(ErrorCode::InvalidArgument, "motion bounds must partition the axis");
  }
  // Every band comes from the unmoved spectrum, so the composite is the input itself.
  if (std::all_of(motion.transforms.begin(), motion.transforms.end(),
                  [](const RigidTransform& t) { return t.is_identity(); })) {
    return v;
  }
  const std::size_t total = e.count();
  auto* buf = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * total));
  auto* spec = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * total));
  auto* composite = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * total));
  fftw_plan forward = nullptr;
  fftw_plan inverse = nullptr;
  {
    std::lock_guard<std::mutex> lock(fftw_plan_mutex());
    const int nz = static_cast<int>(e.nz), ny = static_cast<int>(e.ny), nx = static_cast<int>(e.nx);
    forward = fftw_plan_dft_3d(nz, ny, nx, buf, spec, FFTW_FORWARD, FFTW_ESTIMATE);
    inverse = fftw_plan_dft_3d(nz, ny, nx, composite, buf, FFTW_BACKWARD, FFTW_ESTIMATE);
  }
  const std::array<std::size_t, 3> stride{1, e.nx, e.nx * e.ny};
  const std::size_t s = stride[motion.axis];
  for (std::size_t seg = 0; seg < segments; ++seg) {
    const Volume moved = affine_resample(v, motion.transforms[seg]);
    const auto d = moved.data();
    for (std::size_t i = 0; i < total; ++i) {
      buf[i][0] = static_cast<double>(d[i]);
      buf[i][1] = 0.0;
    }
    fftw_execute(forward);
    for (std::size_t i = 0; i < total; ++i) {
      const std::size_t k = (i / s) % n_axis;
      const std::size_t shifted = (k + n_axis / 2) % n_axis;
      if (shifted >= motion.bounds[seg] && shifted < motion.bounds[seg + 1]) {
        composite[i][0] = spec[i][0];
        composite[i][1] = spec[i][1];
      }
    }
  }
  fftw_execute(inverse);
  Volume out(e, v.voxel_size());
  out.world_transform = v.world_transform;
  auto o = out.data();
  const double inv = 1.0 / static_cast<double>(total);
  for (std::size_t i = 0; i < total; ++i) o[i] = static_cast<float>(buf[i][0] * inv);
  {
    std::lock_guard<std::mutex> lock(fftw_plan_mutex());
    fftw_destroy_plan(forward);
    fftw_destroy_plan(inverse);
  }
  fftw_free(buf);
  fftw_free(spec);
  fftw_free(composite);
  return out;
}

AugmentResult apply_pipeline(const Volume& v, const AugmentSpec& spec, Rng& rng) {
  spec.validate();
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  AugmentResult r{v, {}};
  if (coin(rng) < spec.p_blur) {
    r.volume = blur(r.volume, uniform(rng, spec.blur_sigma_mm[0], spec.blur_sigma_mm[1]));
    r.applied.blur = true;
  }
  if (coin(rng) < spec.p_noise) {
    const double sd = uniform(rng, spec.noise_std[0], spec.noise_std[1]);
    r.volume = add_noise(r.volume, sd, rng);
    r.applied.noise = true;
  }
  if (coin(rng) < spec.p_spatial) {
    if (coin(rng) < 0.5) {
      RigidTransform t;
      for (double& a : t.rotation_deg) a = uniform(rng, -spec.max_rotation_deg, spec.max_rotation_deg);
      for (double& d : t.translation_mm) d = uniform(rng, -spec.max_translation_mm, spec.max_translation_mm);
      r.volume = affine_resample(r.volume, t, spec.affine_scale);
      r.applied.affine = true;
    } else {
      r.volume = elastic_deform(r.volume, random_elastic_field(spec.elastic_grid, spec.max_elastic_mm, rng));
      r.applied.elastic = true;
    }
  }
  if (coin(rng) < spec.p_bias) {
    std::vector<double> c(bias_term_count(spec.bias_order));
    for (double& x : c) x = uniform(rng, -spec.max_bias_coefficient, spec.max_bias_coefficient);
    r.volume = bias_field(r.volume, c, spec.bias_order);
    r.applied.bias = true;
  }
  if (coin(rng) < spec.p_motion) {
    r.volume = motion_artifact(r.volume, random_motion(r.volume, spec, rng));
    r.applied.motion = true;
  }
  return r;
}

}  // namespace szdl
