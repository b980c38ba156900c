// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

// Differentiable layer kernels. Every op takes the tape first; nothing is
// recorded when the tape is not recording or no input requires grad.
// Volumetric tensors are laid out [N, C, D, H, W].

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "szdl/common.hpp"
#include "szdl/tensor.hpp"

namespace szdl::ops {

// Elementwise / reductions used by losses and tests.
template <typename Real>
Tensor<Real> add(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real>
Tensor<Real> mul(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real>
Tensor<Real> scale(Tape<Real>& tape, const Tensor<Real>& x, Real factor);
template <typename Real>
Tensor<Real> sum(Tape<Real>& tape, const Tensor<Real>& x);
/// Scalar x[flat_index].
template <typename Real>
Tensor<Real> select(Tape<Real>& tape, const Tensor<Real>& x, std::size_t flat_index);
template <typename Real>
Tensor<Real> reshape(Tape<Real>& tape, const Tensor<Real>& x, Shape shape);

/// 3x3x3 convolution, stride 1, zero padding 1. w: [Cout, Cin, 3, 3, 3], b: [Cout].
template <typename Real>
Tensor<Real> conv3d(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b);

/// 2x2x2 max pooling, stride 2. Ties go to the lowest linear index.
template <typename Real>
Tensor<Real> maxpool3d(Tape<Real>& tape, const Tensor<Real>& x, std::vector<std::size_t>* argmax = nullptr);

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.1;
};

/// Per-channel normalization over (N, D, H, W). Train mode uses the biased batch
/// variance and updates the running statistics (unbiased variance, EMA);
/// eval mode reads them.
template <typename Real>
Tensor<Real> batchnorm3d(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& gamma,
                         const Tensor<Real>& beta, Tensor<Real>& running_mean, Tensor<Real>& running_var,
                         Mode mode, BatchNormOptions options = {});

/// [N, C, ...] -> [N, C] spatial mean.
template <typename Real>
Tensor<Real> global_avg_pool(Tape<Real>& tape, const Tensor<Real>& x);

/// x [N, F] * W [F, O] + b [O].
template <typename Real>
Tensor<Real> dense(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b);

template <typename Real>
Tensor<Real> relu(Tape<Real>& tape, const Tensor<Real>& x);
template <typename Real>
Tensor<Real> sigmoid(Tape<Real>& tape, const Tensor<Real>& x);
/// Softmax over the last axis with max subtraction.
template <typename Real>
Tensor<Real> softmax(Tape<Real>& tape, const Tensor<Real>& x);

/// Inverted dropout. Eval mode and p = 0 return x unchanged.
template <typename Real>
Tensor<Real> dropout(Tape<Real>& tape, const Tensor<Real>& x, double p, Mode mode, Rng* rng);

/// Mean over the batch of -log softmax(logits)[label], via fused log-softmax.
template <typename Real>
Tensor<Real> cross_entropy(Tape<Real>& tape, const Tensor<Real>& logits, std::span<const int> labels);

enum class DownsampleMode { Mean, Nearest };

/// Halves the last three extents; Mean averages each 2x2x2 block, Nearest keeps
/// its first voxel.
template <typename Real>
Tensor<Real> downsample2x(Tape<Real>& tape, const Tensor<Real>& x, DownsampleMode mode = DownsampleMode::Mean);

/// y[n, c, ...] = gate[n, c] * x[n, c, ...].
template <typename Real>
Tensor<Real> channel_scale(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& gate);

}  // namespace szdl::ops
