// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

// Central finite-difference checks of tape gradients (64-bit).

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "szdl/common.hpp"
#include "szdl/tensor.hpp"

namespace szdl {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;  // on the relative error
  double floor = 1e-6;      // denominator floor for near-zero gradients
  std::size_t samples = 100;
};

struct GradCheckReport {
  std::string name;
  std::size_t coordinates = 0;  // checked
  std::size_t kinks = 0;        // redrawn because a ReLU/max switched inside the step
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool passed = false;
};

/// Scalar loss builder. Must be deterministic and read the current values of
/// the tensors under test.
using LossFn = std::function<Tensor<double>(Tape<double>&)>;

/// relative error = |analytic - numeric| / max(|analytic|, |numeric|, floor).
double relative_error(double analytic, double numeric, double floor);

/// Samples `options.samples` coordinates uniformly over all entries of `wrt`
/// (every entry once if there are fewer) and compares tape gradients with
/// (L(x+h) - L(x-h)) / 2h. A coordinate whose one-sided slopes disagree is a
/// kink; it is counted and replaced by another draw.
GradCheckReport check_gradients(const std::string& name, const LossFn& loss, std::vector<Tensor<double>> wrt,
                                Rng& rng, const GradCheckOptions& options = {});

/// Every differentiable op, the SE block and the toy-width model (16^3 input).
std::vector<GradCheckReport> run_gradient_suite(std::uint64_t seed, const GradCheckOptions& options = {});

nlohmann::json to_json(const std::vector<GradCheckReport>& reports);

}  // namespace szdl
