// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

#include "szdl/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "szdl/model.hpp"
#include "szdl/ops.hpp"

namespace szdl {
namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.values()) v = u(rng);
  return t;
}

// Values bounded away from zero so a ReLU never switches inside the step.
Tensor<double> away_from_zero(Shape shape, Rng& rng) {
  Tensor<double> t = random_tensor(std::move(shape), rng);
  for (double& v : t.values()) {
    if (std::fabs(v) < 0.05) v = v < 0 ? v - 0.05 : v + 0.05;
  }
  return t;
}

Tensor<double> leaf(Tensor<double> t) {
  t.set_requires_grad(true);
  return t;
}

// sum(out * r): a scalar with a non-trivial gradient for every output entry.
Tensor<double> project(Tape<double>& tape, const Tensor<double>& out, const Tensor<double>& r) {
  return ops::sum(tape, ops::mul(tape, out, r));
}

double evaluate(const LossFn& loss) {
  Tape<double> tape(false);
  return loss(tape).item();
}

}  // namespace

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), floor});
  return std::fabs(analytic - numeric) / denom;
}

GradCheckReport check_gradients(const std::string& name, const LossFn& loss, std::vector<Tensor<double>> wrt,
                                Rng& rng, const GradCheckOptions& options) {
  GradCheckReport report;
  report.name = name;
  for (auto& t : wrt) {
    if (!t.requires_grad()) t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape<double> tape;
    const Tensor<double> l = loss(tape);
    tape.backward(l);
  }
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    for (std::size_t i = 0; i < wrt[k].size(); ++i) coords.emplace_back(k, i);
  }
  if (coords.size() > options.samples) std::shuffle(coords.begin(), coords.end(), rng);

  const double h = options.step;
  for (const auto& [k, i] : coords) {
    if (report.coordinates >= options.samples) break;
    double& v = wrt[k].values()[i];
    const double saved = v;
    const double f0 = evaluate(loss);
    v = saved + h;
    const double fp = evaluate(loss);
    v = saved - h;
    const double fm = evaluate(loss);
    v = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    const double analytic = std::as_const(wrt[k]).grad()[i];
    const double rel = relative_error(analytic, numeric, options.floor);
    if (rel >= options.tolerance) {
      const double right = (fp - f0) / h;
      const double left = (f0 - fm) / h;
      if (relative_error(right, left, options.floor) > 1e-2) {
        ++report.kinks;
        continue;
      }
    }
    ++report.coordinates;
    report.max_rel_error = std::max(report.max_rel_error, rel);
    report.max_abs_error = std::max(report.max_abs_error, std::fabs(analytic - numeric));
  }
  report.passed = report.coordinates > 0 && report.max_rel_error < options.tolerance;
  return report;
}

std::vector<GradCheckReport> run_gradient_suite(std::uint64_t seed, const GradCheckOptions& options) {
  Rng rng(seed);
  std::vector<GradCheckReport> out;
  auto run = [&](const std::string& name, const LossFn& f, std::vector<Tensor<double>> wrt) {
    out.push_back(check_gradients(name, f, std::move(wrt), rng, options));
  };

  {
    auto x = leaf(random_tensor({2, 2, 4, 4, 4}, rng));
    auto w = leaf(random_tensor({3, 2, 3, 3, 3}, rng));
    auto b = leaf(random_tensor({3}, rng));
    auto r = random_tensor({2, 3, 4, 4, 4}, rng);
    run("conv3d", [=](Tape<double>& t) { return project(t, ops::conv3d(t, x, w, b), r); }, {x, w, b});
  }
  {
    auto x = leaf(random_tensor({1, 2, 4, 4, 4}, rng));
    auto r = random_tensor({1, 2, 2, 2, 2}, rng);
    run("maxpool3d", [=](Tape<double>& t) { return project(t, ops::maxpool3d(t, x), r); }, {x});
  }
  for (Mode mode : {Mode::Train, Mode::Eval}) {
    auto x = leaf(random_tensor({3, 2, 3, 3, 3}, rng, -2.0, 3.0));
    auto g = leaf(random_tensor({2}, rng, 0.5, 1.5));
    auto be = leaf(random_tensor({2}, rng));
    auto r = random_tensor({3, 2, 3, 3, 3}, rng);
    Tensor<double> rm(Shape{2}, 0.1);
    Tensor<double> rv(Shape{2}, 1.3);
    const std::string name = mode == Mode::Train ? "batchnorm3d.train" : "batchnorm3d.eval";
    run(name,
        [=](Tape<double>& t) mutable { return project(t, ops::batchnorm3d(t, x, g, be, rm, rv, mode), r); },
        {x, g, be});
  }
  {
    auto x = leaf(random_tensor({2, 3, 4, 4, 4}, rng));
    auto r = random_tensor({2, 3}, rng);
    run("global_avg_pool", [=](Tape<double>& t) { return project(t, ops::global_avg_pool(t, x), r); }, {x});
  }
  {
    auto x = leaf(random_tensor({4, 12}, rng));
    auto w = leaf(random_tensor({12, 5}, rng));
    auto b = leaf(random_tensor({5}, rng));
    auto r = random_tensor({4, 5}, rng);
    run("dense", [=](Tape<double>& t) { return project(t, ops::dense(t, x, w, b), r); }, {x, w, b});
  }
  {
    auto x = leaf(away_from_zero({4, 40}, rng));
    auto r = random_tensor({4, 40}, rng);
    run("relu", [=](Tape<double>& t) { return project(t, ops::relu(t, x), r); }, {x});
  }
  {
    auto x = leaf(random_tensor({4, 40}, rng, -4.0, 4.0));
    auto r = random_tensor({4, 40}, rng);
    run("sigmoid", [=](Tape<double>& t) { return project(t, ops::sigmoid(t, x), r); }, {x});
  }
  {
    auto x = leaf(random_tensor({20, 6}, rng, -3.0, 3.0));
    auto r = random_tensor({20, 6}, rng);
    run("softmax", [=](Tape<double>& t) { return project(t, ops::softmax(t, x), r); }, {x});
  }
  {
    auto x = leaf(random_tensor({4, 40}, rng));
    auto r = random_tensor({4, 40}, rng);
    const std::uint64_t mask_seed = rng();
    run("dropout.train",
        [=](Tape<double>& t) {
          Rng mask(mask_seed);
          return project(t, ops::dropout(t, x, 0.5, Mode::Train, &mask), r);
        },
        {x});
  }
  {
    auto x = leaf(random_tensor({50, 2}, rng, -3.0, 3.0));
    std::vector<int> labels(50);
    for (int& l : labels) l = static_cast<int>(rng() % 2);
    run("cross_entropy", [=](Tape<double>& t) { return ops::cross_entropy(t, x, labels); }, {x});
  }
  for (ops::DownsampleMode mode : {ops::DownsampleMode::Mean, ops::DownsampleMode::Nearest}) {
    auto x = leaf(random_tensor({1, 2, 4, 4, 8}, rng));
    auto r = random_tensor({1, 2, 2, 2, 4}, rng);
    run(mode == ops::DownsampleMode::Mean ? "downsample2x.mean" : "downsample2x.nearest",
        [=](Tape<double>& t) { return project(t, ops::downsample2x(t, x, mode), r); }, {x});
  }
  {
    auto x = leaf(random_tensor({2, 3, 3, 3, 3}, rng));
    auto g = leaf(random_tensor({2, 3}, rng));
    auto r = random_tensor({2, 3, 3, 3, 3}, rng);
    run("channel_scale", [=](Tape<double>& t) { return project(t, ops::channel_scale(t, x, g), r); }, {x, g});
  }
  {
    auto a = leaf(random_tensor({5, 20}, rng));
    auto b = leaf(random_tensor({5, 20}, rng));
    auto r = random_tensor({5, 20}, rng);
    run("add", [=](Tape<double>& t) { return project(t, ops::add(t, a, b), r); }, {a, b});
    run("mul", [=](Tape<double>& t) { return project(t, ops::mul(t, a, b), r); }, {a, b});
    run("scale", [=](Tape<double>& t) { return project(t, ops::scale(t, a, 0.37), r); }, {a});
    run("select", [=](Tape<double>& t) { return ops::select(t, ops::mul(t, a, r), 17); }, {a});
    run("reshape", [=](Tape<double>& t) { return project(t, ops::reshape(t, a, Shape{10, 10}), r.view({10, 10})); },
        {a});
    run("sum", [=](Tape<double>& t) { return ops::sum(t, ops::mul(t, a, a)); }, {a});
  }
  {
    auto x = leaf(random_tensor({2, 8, 3, 3, 3}, rng));
    auto w1 = leaf(random_tensor({8, 2}, rng));
    auto b1 = leaf(random_tensor({2}, rng));
    auto w2 = leaf(random_tensor({2, 8}, rng));
    auto b2 = leaf(random_tensor({8}, rng));
    auto r = random_tensor({2, 8, 3, 3, 3}, rng);
    run("se_block", [=](Tape<double>& t) { return project(t, se_block(t, x, w1, b1, w2, b2), r); },
        {x, w1, b1, w2, b2});
  }
  {
    ModelConfig config;
    config.input_extent = 16;
    config.width_num = 1;
    config.width_den = 16;
    config.se_ratio = 4;
    config.dropout_p = 0.0;
    auto model = std::make_shared<Model<double>>(config, rng());
    auto batch = random_tensor({2, 1, 16, 16, 16}, rng, 0.0, 1.0);
    const std::vector<int> labels{0, 1};
    LossFn loss = [model, batch, labels](Tape<double>& t) {
      const auto out = model->forward(t, batch, Mode::Train, nullptr);
      return ops::cross_entropy(t, out.logits, labels);
    };
    // One report per layer: the parameters sharing a "blockB.xxxI" / "classifier.denseK" prefix.
    std::vector<std::pair<std::string, std::vector<Tensor<double>>>> groups;
    for (auto& p : model->parameters()) {
      const std::size_t dot = p.name.rfind('.');
      std::string layer = p.name.substr(0, dot);
      if (const auto fc = layer.find(".fc"); fc != std::string::npos) layer = layer.substr(0, fc);
      if (groups.empty() || groups.back().first != layer) groups.emplace_back(layer, std::vector<Tensor<double>>{});
      groups.back().second.push_back(p.tensor);
    }
    for (auto& [layer, tensors] : groups) run("model." + layer, loss, tensors);
  }
  return out;
}

nlohmann::json to_json(const std::vector<GradCheckReport>& reports) {
  nlohmann::json arr = nlohmann::json::array();
  bool all = true;
  for (const auto& r : reports) {
    arr.push_back({{"name", r.name},
                   {"coordinates", r.coordinates},
                   {"kinks", r.kinks},
                   {"max_rel_error", r.max_rel_error},
                   {"max_abs_error", r.max_abs_error},
                   {"passed", r.passed}});
    all = all && r.passed;
  }
  return {{"checks", arr}, {"all_passed", all}};
}

}  // namespace szdl
