// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

#include "szdl/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>

namespace szdl::ops {
namespace {

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MatMap = Eigen::Map<RowMat<Real>>;
template <typename Real>
using ConstMatMap = Eigen::Map<const RowMat<Real>>;
template <typename Real>
using StridedMap = Eigen::Map<RowMat<Real>, 0, Eigen::OuterStride<>>;
template <typename Real>
using ConstStridedMap = Eigen::Map<const RowMat<Real>, 0, Eigen::OuterStride<>>;

[[noreturn]] void shape_error(const std::string& op, const std::string& what) {
  throw Error(ErrorCode::ShapeMismatch, op + ": " + what);
}

void require_rank(const std::string& op, const Shape& shape, std::size_t rank) {
  if (shape.size() != rank) {
    shape_error(op, "expected rank " + std::to_string(rank) + ", got " + shape_string(shape));
  }
}

void require_same_shape(const std::string& op, const Shape& a, const Shape& b) {
  if (a != b) shape_error(op, shape_string(a) + " vs " + shape_string(b));
}

// Spatial size of [N, C, ...].
std::size_t spatial_count(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t i = 2; i < s.size(); ++i) n *= s[i];
  return n;
}

// Sums in 64 bit with independent partial accumulators so the loop vectorizes.
template <typename Real>
double sum_of(const Real* p, std::size_t n) {
  double a[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t k = 0; k < 8; ++k) a[k] += static_cast<double>(p[i + k]);
  }
  double tail = 0.0;
  for (; i < n; ++i) tail += static_cast<double>(p[i]);
  return ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7])) + tail;
}

template <typename Real>
double dot_of(const Real* p, const Real* q, std::size_t n) {
  double a[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t k = 0; k < 8; ++k) a[k] += static_cast<double>(p[i + k]) * static_cast<double>(q[i + k]);
  }
  double tail = 0.0;
  for (; i < n; ++i) tail += static_cast<double>(p[i]) * static_cast<double>(q[i]);
  return ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7])) + tail;
}

template <typename Real>
double sq_dev_of(const Real* p, std::size_t n, double mean) {
  double a[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t k = 0; k < 8; ++k) {
      const double d = static_cast<double>(p[i + k]) - mean;
      a[k] += d * d;
    }
  }
  double tail = 0.0;
  for (; i < n; ++i) {
    const double d = static_cast<double>(p[i]) - mean;
    tail += d * d;
  }
  return ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7])) + tail;
}

// Depth planes per im2col tile, keeping a tile near 1 MiB.
std::size_t planes_per_tile(std::size_t K, std::size_t plane, std::size_t D) {
  const std::size_t target = (std::size_t{1} << 18) / std::max<std::size_t>(K, 1);
  return std::clamp<std::size_t>(target / std::max<std::size_t>(plane, 1), 1, D);
}

// col[(c*27 + kd*9 + kh*3 + kw), ((d-d0)*H + h)*W + w] = x[c, d+kd-1, h+kh-1, w+kw-1] (0 outside),
// for output planes d in [d0, d1).
template <typename Real>
void im2col(const Real* x, std::size_t channels, std::size_t D, std::size_t H, std::size_t W, std::size_t d0,
            std::size_t d1, Real* col) {
  const std::size_t V = (d1 - d0) * H * W;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t kd = 0; kd < 3; ++kd) {
      for (std::size_t kh = 0; kh < 3; ++kh) {
        for (std::size_t kw = 0; kw < 3; ++kw) {
          Real* row = col + (c * 27 + kd * 9 + kh * 3 + kw) * V;
          for (std::size_t d = d0; d < d1; ++d) {
            const std::ptrdiff_t sd = static_cast<std::ptrdiff_t>(d + kd) - 1;
            if (sd < 0 || sd >= static_cast<std::ptrdiff_t>(D)) {
              std::fill_n(row + (d - d0) * H * W, H * W, Real(0));
              continue;
            }
            for (std::size_t h = 0; h < H; ++h) {
              Real* dst = row + ((d - d0) * H + h) * W;
              const std::ptrdiff_t sh = static_cast<std::ptrdiff_t>(h + kh) - 1;
              if (sh < 0 || sh >= static_cast<std::ptrdiff_t>(H)) {
                std::fill_n(dst, W, Real(0));
                continue;
              }
              const Real* src = x + ((c * D + static_cast<std::size_t>(sd)) * H + static_cast<std::size_t>(sh)) * W;
              if (kw == 0) {
                dst[0] = Real(0);
                std::copy_n(src, W - 1, dst + 1);
              } else if (kw == 1) {
                std::copy_n(src, W, dst);
              } else {
                std::copy_n(src + 1, W - 1, dst);
                dst[W - 1] = Real(0);
              }
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col over the same plane range: scatters col back into dx with +=.
template <typename Real>
void col2im_add(const Real* col, std::size_t channels, std::size_t D, std::size_t H, std::size_t W, std::size_t d0,
                std::size_t d1, Real* dx) {
  const std::size_t V = (d1 - d0) * H * W;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t kd = 0; kd < 3; ++kd) {
      for (std::size_t kh = 0; kh < 3; ++kh) {
        for (std::size_t kw = 0; kw < 3; ++kw) {
          const Real* row = col + (c * 27 + kd * 9 + kh * 3 + kw) * V;
          for (std::size_t d = d0; d < d1; ++d) {
            const std::ptrdiff_t sd = static_cast<std::ptrdiff_t>(d + kd) - 1;
            if (sd < 0 || sd >= static_cast<std::ptrdiff_t>(D)) continue;
            for (std::size_t h = 0; h < H; ++h) {
              const std::ptrdiff_t sh = static_cast<std::ptrdiff_t>(h + kh) - 1;
              if (sh < 0 || sh >= static_cast<std::ptrdiff_t>(H)) continue;
              const Real* src = row + ((d - d0) * H + h) * W;
              Real* dst = dx + ((c * D + static_cast<std::size_t>(sd)) * H + static_cast<std::size_t>(sh)) * W;
              if (kw == 0) {
                for (std::size_t w = 1; w < W; ++w) dst[w - 1] += src[w];
              } else if (kw == 1) {
                for (std::size_t w = 0; w < W; ++w) dst[w] += src[w];
              } else {
                for (std::size_t w = 0; w + 1 < W; ++w) dst[w + 1] += src[w];
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename Real>
Tensor<Real> add(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same_shape("add", a.shape(), b.shape());
  Tensor<Real> out(a.shape());
  auto o = out.values();
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
  if (tape.tracks({&a, &b})) {
    tape.record(out, [a = a, b = b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> mul(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same_shape("mul", a.shape(), b.shape());
  Tensor<Real> out(a.shape());
  auto o = out.values();
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
  if (tape.tracks({&a, &b})) {
    tape.record(out, [a = a, b = b, out]() mutable {
      auto g = out.grad();
      auto av = a.values();
      auto bv = b.values();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> scale(Tape<Real>& tape, const Tensor<Real>& x, Real factor) {
  Tensor<Real> out(x.shape());
  auto o = out.values();
  auto xv = x.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = factor * xv[i];
  if (tape.tracks({&x})) {
    tape.record(out, [x = x, out, factor]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> sum(Tape<Real>& tape, const Tensor<Real>& x) {
  Tensor<Real> out(Shape{1}, static_cast<Real>(sum_of(x.values().data(), x.size())));
  if (tape.tracks({&x})) {
    tape.record(out, [x = x, out]() mutable {
      const Real g = out.grad()[0];
      for (Real& gx : x.grad()) gx += g;
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> select(Tape<Real>& tape, const Tensor<Real>& x, std::size_t flat_index) {
  if (flat_index >= x.size()) shape_error("select", "index out of range");
  Tensor<Real> out(Shape{1}, x.values()[flat_index]);
  if (tape.tracks({&x})) {
    tape.record(out, [x = x, out, flat_index]() mutable { x.grad()[flat_index] += out.grad()[0]; });
  }
  return out;
}

template <typename Real>
Tensor<Real> reshape(Tape<Real>& tape, const Tensor<Real>& x, Shape shape) {
  Tensor<Real> out = x.view(std::move(shape));
  if (tape.tracks({&x})) {
    tape.record(out, [x = x, out]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> conv3d(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b) {
  require_rank("conv3d", x.shape(), 5);
  require_rank("conv3d weight", w.shape(), 5);
  require_rank("conv3d bias", b.shape(), 1);
  const std::size_t N = x.dim(0), Cin = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const std::size_t Cout = w.dim(0);
  if (w.dim(1) != Cin || w.dim(2) != 3 || w.dim(3) != 3 || w.dim(4) != 3) {
    shape_error("conv3d", "weight " + shape_string(w.shape()) + " does not match input " + shape_string(x.shape()));
  }
  if (b.dim(0) != Cout) shape_error("conv3d", "bias length != Cout");
  const std::size_t V = D * H * W;
  const std::size_t K = Cin * 27;

  const std::size_t plane = H * W;
  const std::size_t tile = planes_per_tile(K, plane, D);

  Tensor<Real> out(Shape{N, Cout, D, H, W});
  std::vector<Real> col(K * tile * plane);
  const ConstMatMap<Real> wm(w.values().data(), Cout, K);
  const auto bv = b.values();
  for (std::size_t n = 0; n < N; ++n) {
    Real* on = out.values().data() + n * Cout * V;
    for (std::size_t d0 = 0; d0 < D; d0 += tile) {
      const std::size_t d1 = std::min(D, d0 + tile);
      const auto vt = static_cast<Eigen::Index>((d1 - d0) * plane);
      im2col(x.values().data() + n * Cin * V, Cin, D, H, W, d0, d1, col.data());
      StridedMap<Real> om(on + d0 * plane, static_cast<Eigen::Index>(Cout), vt,
                          Eigen::OuterStride<>(static_cast<Eigen::Index>(V)));
      om.noalias() = wm * ConstMatMap<Real>(col.data(), static_cast<Eigen::Index>(K), vt);
    }
    for (std::size_t co = 0; co < Cout; ++co) {
      Real* row = on + co * V;
      for (std::size_t v = 0; v < V; ++v) row[v] += bv[co];
    }
  }

  if (tape.tracks({&x, &w, &b})) {
    tape.record(out, [x = x, w = w, b = b, out, N, Cin, Cout, D, H, W, V, K, plane, tile]() mutable {
      const auto g = out.grad();
      std::vector<Real> col(K * tile * plane);
      const ConstMatMap<Real> wm(w.values().data(), Cout, K);
      for (std::size_t n = 0; n < N; ++n) {
        const Real* gn = g.data() + n * Cout * V;
        if (b.requires_grad()) {
          auto gb = b.grad();
          for (std::size_t co = 0; co < Cout; ++co) gb[co] += static_cast<Real>(sum_of(gn + co * V, V));
        }
        for (std::size_t d0 = 0; d0 < D; d0 += tile) {
          const std::size_t d1 = std::min(D, d0 + tile);
          const auto vt = static_cast<Eigen::Index>((d1 - d0) * plane);
          const ConstStridedMap<Real> gm(gn + d0 * plane, static_cast<Eigen::Index>(Cout), vt,
                                         Eigen::OuterStride<>(static_cast<Eigen::Index>(V)));
          if (w.requires_grad()) {
            im2col(x.values().data() + n * Cin * V, Cin, D, H, W, d0, d1, col.data());
            MatMap<Real> gw(w.grad().data(), Cout, K);
            gw.noalias() += gm * ConstMatMap<Real>(col.data(), static_cast<Eigen::Index>(K), vt).transpose();
          }
          if (x.requires_grad()) {
            MatMap<Real> cm(col.data(), static_cast<Eigen::Index>(K), vt);
            cm.noalias() = wm.transpose() * gm;
            col2im_add(col.data(), Cin, D, H, W, d0, d1, x.grad().data() + n * Cin * V);
          }
        }
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> maxpool3d(Tape<Real>& tape, const Tensor<Real>& x, std::vector<std::size_t>* argmax) {
  require_rank("maxpool3d", x.shape(), 5);
  const std::size_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  if (D % 2 != 0 || H % 2 != 0 || W % 2 != 0) {
    throw Error(ErrorCode::OddExtent, "maxpool3d needs even spatial extents, got " + shape_string(x.shape()));
  }
  const std::size_t d2 = D / 2, h2 = H / 2, w2 = W / 2;
  Tensor<Real> out(Shape{N, C, d2, h2, w2});
  std::vector<std::size_t> index(out.size());
  const auto xv = x.values();
  auto o = out.values();
  std::size_t k = 0;
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const std::size_t base = nc * D * H * W;
    for (std::size_t d = 0; d < d2; ++d) {
      for (std::size_t h = 0; h < h2; ++h) {
        for (std::size_t w = 0; w < w2; ++w, ++k) {
          std::size_t best = base + ((2 * d) * H + 2 * h) * W + 2 * w;
          for (std::size_t dd = 0; dd < 2; ++dd) {
            for (std::size_t hh = 0; hh < 2; ++hh) {
              for (std::size_t ww = 0; ww < 2; ++ww) {
                const std::size_t at = base + ((2 * d + dd) * H + 2 * h + hh) * W + 2 * w + ww;
                if (xv[at] > xv[best]) best = at;
              }
            }
          }
          index[k] = best;
          o[k] = xv[best];
        }
      }
    }
  }
  if (argmax != nullptr) *argmax = index;
  if (tape.tracks({&x})) {
    tape.record(out, [x = x, out, index = std::move(index)]() mutable {
      const auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[index[i]] += g[i];
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> batchnorm3d(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& gamma,
                         const Tensor<Real>& beta, Tensor<Real>& running_mean, Tensor<Real>& running_var,
                         Mode mode, BatchNormOptions options) {
  if (x.rank() < 3) shape_error("batchnorm3d", "expected [N, C, ...], got " + shape_string(x.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1), S = spatial_count(x.shape());
  for (const Tensor<Real>* t : std::initializer_list<const Tensor<Real>*>{&gamma, &beta, &running_mean, &running_var}) {
    if (t->rank() != 1 || t->dim(0) != C) shape_error("batchnorm3d", "per-channel tensors must be [C]");
  }
  const std::size_t M = N * S;
  if (mode == Mode::Train && M < 2) {
    throw Error(ErrorCode::DegenerateBatch, "train-mode batchnorm needs at least 2 values per channel");
  }

  Tensor<Real> out(x.shape());
  std::vector<double> means(C);
  std::vector<double> inv_std(C);
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  auto o = out.values();
  auto rm = running_mean.values();
  auto rv = running_var.values();

  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0.0;
    double var = 0.0;
    if (mode == Mode::Train) {
      for (std::size_t n = 0; n < N; ++n) mean += sum_of(xv.data() + (n * C + c) * S, S);
      mean /= static_cast<double>(M);
      for (std::size_t n = 0; n < N; ++n) var += sq_dev_of(xv.data() + (n * C + c) * S, S, mean);
      var /= static_cast<double>(M);
      const double m = options.momentum;
      const double unbiased = var * static_cast<double>(M) / static_cast<double>(M - 1);
      rm[c] = static_cast<Real>((1.0 - m) * static_cast<double>(rm[c]) + m * mean);
      rv[c] = static_cast<Real>((1.0 - m) * static_cast<double>(rv[c]) + m * unbiased);
    } else {
      mean = static_cast<double>(rm[c]);
      var = static_cast<double>(rv[c]);
    }
    const double inv = 1.0 / std::sqrt(var + options.eps);
    means[c] = mean;
    inv_std[c] = inv;
    // y = a * x + b0 with a = gamma / sigma, b0 = beta - a * mean
    const double a = static_cast<double>(gv[c]) * inv;
    const auto as = static_cast<Real>(a);
    const auto bs = static_cast<Real>(static_cast<double>(bv[c]) - a * mean);
    for (std::size_t n = 0; n < N; ++n) {
      const Real* p = xv.data() + (n * C + c) * S;
      Real* q = o.data() + (n * C + c) * S;
      for (std::size_t s = 0; s < S; ++s) q[s] = as * p[s] + bs;
    }
  }

  if (tape.tracks({&x, &gamma, &beta})) {
    tape.record(out, [x = x, gamma = gamma, beta = beta, out, means = std::move(means), inv_std = std::move(inv_std),
                      N, C, S, M, mode]() mutable {
      const auto g = out.grad();
      const auto xv = x.values();
      const auto gv = gamma.values();
      for (std::size_t c = 0; c < C; ++c) {
        double sum_g = 0.0;
        double sum_gx = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t off = (n * C + c) * S;
          sum_g += sum_of(g.data() + off, S);
          sum_gx += dot_of(g.data() + off, xv.data() + off, S);
        }
        // sum of g * xhat
        const double sum_gh = (sum_gx - means[c] * sum_g) * inv_std[c];
        if (gamma.requires_grad()) gamma.grad()[c] += static_cast<Real>(sum_gh);
        if (beta.requires_grad()) beta.grad()[c] += static_cast<Real>(sum_g);
        if (!x.requires_grad()) continue;
        auto gx = x.grad();
        const double k = static_cast<double>(gv[c]) * inv_std[c];
        // dx = c1 * g + c2 * x + c3
        double c1 = k, c2 = 0.0, c3 = 0.0;
        if (mode == Mode::Train) {
          const double md = static_cast<double>(M);
          c2 = -k / md * inv_std[c] * sum_gh;
          c3 = -k / md * sum_g - c2 * means[c];
        }
        const auto r1 = static_cast<Real>(c1), r2 = static_cast<Real>(c2), r3 = static_cast<Real>(c3);
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t off = (n * C + c) * S;
          const Real* gp = g.data() + off;
          const Real* xp = xv.data() + off;
          Real* dp = gx.data() + off;
          for (std::size_t s = 0; s < S; ++s) dp[s] += r1 * gp[s] + r2 * xp[s] + r3;
        }
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> global_avg_pool(Tape<Real>& tape, const Tensor<Real>& x) {
  if (x.rank() < 3) shape_error("global_avg_pool", "expected [N, C, ...], got " + shape_string(x.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1), S = spatial_count(x.shape());
  Tensor<Real> out(Shape{N, C});
  const auto xv = x.values();
  auto o = out.values();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    o[nc] = static_cast<Real>(sum_of(xv.data() + nc * S, S) / static_cast<double>(S));
  }
  if (tape.tracks({&x})) {
    tape.record(out, [x = x, out, N, C, S]() mutable {
      const auto g = out.grad();
      auto gx = x.grad();
      const Real inv = static_cast<Real>(1.0 / static_cast<double>(S));
      for (std::size_t nc = 0; nc < N * C; ++nc) {
        const Real share = g[nc] * inv;
        for (std::size_t s = 0; s < S; ++s) gx[nc * S + s] += share;
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> dense(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b) {
  require_rank("dense", x.shape(), 2);
  require_rank("dense weight", w.shape(), 2);
  require_rank("dense bias", b.shape(), 1);
  const std::size_t N = x.dim(0), F = x.dim(1), O = w.dim(1);
  if (w.dim(0) != F) shape_error("dense", "input " + shape_string(x.shape()) + " vs weight " + shape_string(w.shape()));
  if (b.dim(0) != O) shape_error("dense", "bias length != output width");
  Tensor<Real> out(Shape{N, O});
  MatMap<Real> om(out.values().data(), N, O);
  om.noalias() = ConstMatMap<Real>(x.values().data(), N, F) * ConstMatMap<Real>(w.values().data(), F, O);
  const auto bv = b.values();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t o = 0; o < O; ++o) om(n, o) += bv[o];
  }
  if (tape.tracks({&x, &w, &b})) {
    tape.record(out, [x = x, w = w, b = b, out, N, F, O]() mutable {
      const ConstMatMap<Real> gm(out.grad().data(), N, O);
      if (x.requires_grad()) {
        MatMap<Real> gx(x.grad().data(), N, F);
        gx.noalias() += gm * ConstMatMap<Real>(w.values().data(), F, O).transpose();
      }
      if (w.requires_grad()) {
        MatMap<Real> gw(w.grad().data(), F, O);
        gw.noalias() += ConstMatMap<Real>(x.values().data(), N, F).transpose() * gm;
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t o = 0; o < O; ++o) {
          double acc = 0.0;
          for (std::size_t n = 0; n < N; ++n) acc += static_cast<double>(gm(n, o));
          gb[o] += static_cast<Real>(acc);
        }
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> relu(Tape<Real>& tape, const Tensor<Real>& x) {
  Tensor<Real> out(x.shape());
  const auto xv = x.values();
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] > Real(0) ? xv[i] : Real(0);
  if (tape.tracks({&x})) {
    tape.record(out, [x = x, out]() mutable {
      const auto g = out.grad();
      const auto xv = x.values();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xv[i] > Real(0)) gx[i] += g[i];
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> sigmoid(Tape<Real>& tape, const Tensor<Real>& x) {
  Tensor<Real> out(x.shape());
  const auto xv = x.values();
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double v = static_cast<double>(xv[i]);
    o[i] = static_cast<Real>(v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)));
  }
  if (tape.tracks({&x})) {
    // The derivative is taken from x, not from y * (1 - y): once y rounds to 1
    // the product is exactly 0 in 32-bit, which silences saturated units.
    tape.record(out, [x = x, out]() mutable {
      const auto g = out.grad();
      const auto xs = x.values();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double e = std::exp(-std::fabs(static_cast<double>(xs[i])));
        gx[i] += static_cast<Real>(static_cast<double>(g[i]) * e / ((1.0 + e) * (1.0 + e)));
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> softmax(Tape<Real>& tape, const Tensor<Real>& x) {
  if (x.rank() < 1) shape_error("softmax", "rank 0");
  const std::size_t K = x.shape().back();
  const std::size_t rows = x.size() / K;
  Tensor<Real> out(x.shape());
  const auto xv = x.values();
  auto o = out.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = xv.data() + r * K;
    const double m = static_cast<double>(*std::max_element(in, in + K));
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(static_cast<double>(in[k]) - m);
    for (std::size_t k = 0; k < K; ++k) o[r * K + k] = static_cast<Real>(std::exp(static_cast<double>(in[k]) - m) / z);
  }
  if (tape.tracks({&x})) {
    tape.record(out, [x = x, out, K, rows]() mutable {
      const auto g = out.grad();
      const auto y = out.values();
      auto gx = x.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t k = 0; k < K; ++k) dot += static_cast<double>(g[r * K + k]) * static_cast<double>(y[r * K + k]);
        for (std::size_t k = 0; k < K; ++k) {
          gx[r * K + k] += static_cast<Real>(static_cast<double>(y[r * K + k]) * (static_cast<double>(g[r * K + k]) - dot));
        }
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> dropout(Tape<Real>& tape, const Tensor<Real>& x, double p, Mode mode, Rng* rng) {
  if (!(p >= 0.0 && p < 1.0)) throw Error(ErrorCode::BadProbability, "dropout p must lie in [0, 1)");
  if (mode == Mode::Eval || p == 0.0) return x;
  if (rng == nullptr) throw Error(ErrorCode::InvalidArgument, "train-mode dropout needs an RNG");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const Real keep_scale = static_cast<Real>(1.0 / (1.0 - p));
  std::vector<Real> mask(x.size());
  for (Real& m : mask) m = u(*rng) >= p ? keep_scale : Real(0);
  Tensor<Real> out(x.shape());
  const auto xv = x.values();
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] * mask[i];
  if (tape.tracks({&x})) {
    tape.record(out, [x = x, out, mask = std::move(mask)]() mutable {
      const auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> cross_entropy(Tape<Real>& tape, const Tensor<Real>& logits, std::span<const int> labels) {
  require_rank("cross_entropy", logits.shape(), 2);
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (labels.size() != N) shape_error("cross_entropy", "label count != batch size");
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= K) {
      throw Error(ErrorCode::BadLabel, "label " + std::to_string(l) + " outside [0, " + std::to_string(K) + ")");
    }
  }
  const auto xv = logits.values();
  std::vector<double> probs(N * K);
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const Real* row = xv.data() + n * K;
    const double m = static_cast<double>(*std::max_element(row, row + K));
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(static_cast<double>(row[k]) - m);
    const double lse = m + std::log(z);
    total += lse - static_cast<double>(row[static_cast<std::size_t>(labels[n])]);
    for (std::size_t k = 0; k < K; ++k) probs[n * K + k] = std::exp(static_cast<double>(row[k]) - lse);
  }
  Tensor<Real> out(Shape{1}, static_cast<Real>(total / static_cast<double>(N)));
  if (tape.tracks({&logits})) {
    std::vector<int> label_copy(labels.begin(), labels.end());
    tape.record(out, [logits = logits, out, probs = std::move(probs), label_copy = std::move(label_copy), N, K]() mutable {
      const double g = static_cast<double>(out.grad()[0]) / static_cast<double>(N);
      auto gx = logits.grad();
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t k = 0; k < K; ++k) {
          const double onehot = static_cast<std::size_t>(label_copy[n]) == k ? 1.0 : 0.0;
          gx[n * K + k] += static_cast<Real>(g * (probs[n * K + k] - onehot));
        }
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> downsample2x(Tape<Real>& tape, const Tensor<Real>& x, DownsampleMode mode) {
  if (x.rank() < 3) shape_error("downsample2x", "needs at least three axes");
  const Shape& s = x.shape();
  const std::size_t r = s.size();
  const std::size_t D = s[r - 3], H = s[r - 2], W = s[r - 1];
  if (D % 2 != 0 || H % 2 != 0 || W % 2 != 0) {
    throw Error(ErrorCode::OddExtent, "downsample2x needs even spatial extents, got " + shape_string(s));
  }
  Shape os = s;
  os[r - 3] = D / 2;
  os[r - 2] = H / 2;
  os[r - 1] = W / 2;
  const std::size_t lead = x.size() / (D * H * W);
  Tensor<Real> out(os);
  const auto xv = x.values();
  auto o = out.values();
  std::size_t k = 0;
  for (std::size_t l = 0; l < lead; ++l) {
    const std::size_t base = l * D * H * W;
    for (std::size_t d = 0; d < D / 2; ++d) {
      for (std::size_t h = 0; h < H / 2; ++h) {
        for (std::size_t w = 0; w < W / 2; ++w, ++k) {
          if (mode == DownsampleMode::Nearest) {
            o[k] = xv[base + ((2 * d) * H + 2 * h) * W + 2 * w];
            continue;
          }
          double acc = 0.0;
          for (std::size_t dd = 0; dd < 2; ++dd) {
            for (std::size_t hh = 0; hh < 2; ++hh) {
              const Real* p = xv.data() + base + ((2 * d + dd) * H + 2 * h + hh) * W + 2 * w;
              acc += static_cast<double>(p[0]) + static_cast<double>(p[1]);
            }
          }
          o[k] = static_cast<Real>(acc / 8.0);
        }
      }
    }
  }
  if (tape.tracks({&x})) {
    tape.record(out, [x = x, out, lead, D, H, W, mode]() mutable {
      const auto g = out.grad();
      auto gx = x.grad();
      std::size_t k = 0;
      for (std::size_t l = 0; l < lead; ++l) {
        const std::size_t base = l * D * H * W;
        for (std::size_t d = 0; d < D / 2; ++d) {
          for (std::size_t h = 0; h < H / 2; ++h) {
            for (std::size_t w = 0; w < W / 2; ++w, ++k) {
              if (mode == DownsampleMode::Nearest) {
                gx[base + ((2 * d) * H + 2 * h) * W + 2 * w] += g[k];
                continue;
              }
              const Real share = g[k] / Real(8);
              for (std::size_t dd = 0; dd < 2; ++dd) {
                for (std::size_t hh = 0; hh < 2; ++hh) {
                  Real* p = gx.data() + base + ((2 * d + dd) * H + 2 * h + hh) * W + 2 * w;
                  p[0] += share;
                  p[1] += share;
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> channel_scale(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& gate) {
  if (x.rank() < 3) shape_error("channel_scale", "expected [N, C, ...]");
  const std::size_t N = x.dim(0), C = x.dim(1), S = spatial_count(x.shape());
  if (gate.shape() != Shape{N, C}) {
    shape_error("channel_scale", "gate " + shape_string(gate.shape()) + " vs input " + shape_string(x.shape()));
  }
  Tensor<Real> out(x.shape());
  const auto xv = x.values();
  const auto gv = gate.values();
  auto o = out.values();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    for (std::size_t s = 0; s < S; ++s) o[nc * S + s] = gv[nc] * xv[nc * S + s];
  }
  if (tape.tracks({&x, &gate})) {
    tape.record(out, [x = x, gate = gate, out, N, C, S]() mutable {
      const auto g = out.grad();
      const auto xv = x.values();
      const auto gv = gate.values();
      for (std::size_t nc = 0; nc < N * C; ++nc) {
        if (gate.requires_grad()) {
          gate.grad()[nc] += static_cast<Real>(dot_of(g.data() + nc * S, xv.data() + nc * S, S));
        }
        if (x.requires_grad()) {
          auto gx = x.grad();
          for (std::size_t s = 0; s < S; ++s) gx[nc * S + s] += gv[nc] * g[nc * S + s];
        }
      }
    });
  }
  return out;
}

#define SZDL_INSTANTIATE_OPS(Real)                                                                               \
  template Tensor<Real> add(Tape<Real>&, const Tensor<Real>&, const Tensor<Real>&);                              \
  template Tensor<Real> mul(Tape<Real>&, const Tensor<Real>&, const Tensor<Real>&);                              \
  template Tensor<Real> scale(Tape<Real>&, const Tensor<Real>&, Real);                                           \
  template Tensor<Real> sum(Tape<Real>&, const Tensor<Real>&);                                                   \
  template Tensor<Real> select(Tape<Real>&, const Tensor<Real>&, std::size_t);                                   \
  template Tensor<Real> reshape(Tape<Real>&, const Tensor<Real>&, Shape);                                        \
  template Tensor<Real> conv3d(Tape<Real>&, const Tensor<Real>&, const Tensor<Real>&, const Tensor<Real>&);      \
  template Tensor<Real> maxpool3d(Tape<Real>&, const Tensor<Real>&, std::vector<std::size_t>*);                  \
  template Tensor<Real> batchnorm3d(Tape<Real>&, const Tensor<Real>&, const Tensor<Real>&, const Tensor<Real>&,  \
                                    Tensor<Real>&, Tensor<Real>&, Mode, BatchNormOptions);                       \
  template Tensor<Real> global_avg_pool(Tape<Real>&, const Tensor<Real>&);                                       \
  template Tensor<Real> dense(Tape<Real>&, const Tensor<Real>&, const Tensor<Real>&, const Tensor<Real>&);       \
  template Tensor<Real> relu(Tape<Real>&, const Tensor<Real>&);                                                  \
  template Tensor<Real> sigmoid(Tape<Real>&, const Tensor<Real>&);                                               \
  template Tensor<Real> softmax(Tape<Real>&, const Tensor<Real>&);                                               \
  template Tensor<Real> dropout(Tape<Real>&, const Tensor<Real>&, double, Mode, Rng*);                            \
  template Tensor<Real> cross_entropy(Tape<Real>&, const Tensor<Real>&, std::span<const int>);                   \
  template Tensor<Real> downsample2x(Tape<Real>&, const Tensor<Real>&, DownsampleMode);                          \
  template Tensor<Real> channel_scale(Tape<Real>&, const Tensor<Real>&, const Tensor<Real>&);

SZDL_INSTANTIATE_OPS(float)
SZDL_INSTANTIATE_OPS(double)

#undef SZDL_INSTANTIATE_OPS

}  // namespace szdl::ops
