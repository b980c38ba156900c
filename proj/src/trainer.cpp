// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

#include "szdl/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <numeric>
#include <thread>

#include "szdl/nifti.hpp"
#include "szdl/ops.hpp"

namespace szdl {
namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kInitStream = 0x1a17;
constexpr std::uint64_t kShuffleStream = 0x5f0f;
constexpr std::uint64_t kAugmentStream = 0xa065;
constexpr std::uint64_t kDropoutStream = 0xd409;

template <typename Real>
std::vector<int> labels_of(const std::vector<ManifestRecord>& records, const std::vector<std::size_t>& idx) {
  std::vector<int> out;
  for (std::size_t i : idx) out.push_back(records[i].label);
  return out;
}

bool has_both_classes(const std::vector<ManifestRecord>& records) {
  bool zero = false, one = false;
  for (const auto& r : records) (r.label == 1 ? one : zero) = true;
  return zero && one;
}

// Runs f(k) for k in [0, n) on up to `workers` threads; rethrows the first failure.
template <typename F>
void parallel_for(std::size_t n, std::size_t workers, F f) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t k = 0; k < n; ++k) f(k);
    return;
  }
  const std::size_t t = std::min(workers, n);
  std::vector<std::exception_ptr> errors(t);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < t; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t k = w; k < n; k += t) f(k);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::string precision_name(Precision p) { return p == Precision::Float32 ? "float32" : "float64"; }

template <typename Real>
struct EvalPass {
  double loss;
  std::vector<double> scores;
};

template <typename Real>
EvalPass<Real> evaluate(Model<Real>& model, const std::vector<Volume>& volumes, const std::vector<int>& labels,
                        std::size_t batch_size) {
  Tape<Real> tape(false);
  EvalPass<Real> r{0.0, {}};
  for (std::size_t start = 0; start < volumes.size(); start += batch_size) {
    const std::size_t end = std::min(volumes.size(), start + batch_size);
    std::vector<const Volume*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&volumes[i]);
    const auto out = model.forward(tape, stack_volumes<Real>(batch), Mode::Eval);
    const std::span<const int> lab(labels.data() + start, end - start);
    const double loss = static_cast<double>(ops::cross_entropy(tape, out.logits, lab).item());
    r.loss += loss * static_cast<double>(end - start);
    const auto p = out.probabilities.values();
    const std::size_t k = out.probabilities.dim(1);
    for (std::size_t i = 0; i < end - start; ++i) r.scores.push_back(static_cast<double>(p[i * k + 1]));
  }
  r.loss /= static_cast<double>(volumes.size());
  return r;
}

template <typename Real>
FitResult fit_impl(const TrainConfig& config, const DatasetManifest& manifest, const VolumeSource& source) {
  const auto train = manifest.select(Split::Train);
  const auto val = manifest.select(Split::Val);
  if (train.empty()) throw Error(ErrorCode::EmptySplit, "train split is empty");
  if (val.empty()) throw Error(ErrorCode::EmptySplit, "val split is empty");
  if (!has_both_classes(train)) throw Error(ErrorCode::SingleClassSplit, "train split lacks a class");
  if (!has_both_classes(val)) throw Error(ErrorCode::SingleClassSplit, "val split lacks a class");

  std::vector<Volume> train_volumes, val_volumes;
  std::vector<int> val_labels;
  for (const auto& r : train) train_volumes.push_back(source(r));
  for (const auto& r : val) {
    val_volumes.push_back(source(r));
    val_labels.push_back(r.label);
  }

  Model<Real> model(config.model, derive_seed(config.seed, {kInitStream}));
  AdamState<Real> adam = AdamState<Real>::init(model.parameters(), config.adam);
  FitResult result;
  TrainHistory& history = result.history;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(config.seed, {kShuffleStream, epoch}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double train_loss = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(end));
      std::vector<Volume> inputs(idx.size());
      parallel_for(idx.size(), config.workers, [&](std::size_t k) {
        const std::size_t sample = idx[k];
        if (config.augment) {
          Rng rng(derive_seed(config.seed, {kAugmentStream, sample, epoch}));
          inputs[k] = apply_pipeline(train_volumes[sample], config.augment_spec, rng).volume;
        } else {
          inputs[k] = train_volumes[sample];
        }
      });
      std::vector<const Volume*> ptrs;
      for (const auto& v : inputs) ptrs.push_back(&v);
      const std::vector<int> labels = labels_of<Real>(train, idx);

      Tape<Real> tape;
      Rng dropout_rng(derive_seed(config.seed, {kDropoutStream, epoch, batch_index}));
      const auto out = model.forward(tape, stack_volumes<Real>(ptrs), Mode::Train, &dropout_rng);
      const Tensor<Real> loss = ops::cross_entropy(tape, out.logits, std::span<const int>(labels));
      const double loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value)) {
        throw Error(ErrorCode::NonFiniteLoss, "loss is not finite at epoch " + std::to_string(epoch));
      }
      model.zero_grad();
      tape.backward(loss);
      adam_step(model.parameters(), adam, config.learning_rate);
      train_loss += loss_value * static_cast<double>(idx.size());
    }
    train_loss /= static_cast<double>(train.size());

    const auto pass = evaluate(model, val_volumes, val_labels, config.batch_size);
    if (!std::isfinite(pass.loss)) throw Error(ErrorCode::NonFiniteLoss, "validation loss is not finite");
    ScoredSet scored{pass.scores, val_labels, {}, {}};
    history.epochs.push_back({epoch, train_loss, pass.loss, auc(scored)});

    if (pass.loss < best_loss - config.early_stop.min_delta) {
      best_loss = pass.loss;
      history.best_epoch = epoch;
      stale = 0;
      result.best = make_checkpoint(model, adam, history, epoch);
      if (!config.checkpoint_dir.empty()) {
        std::filesystem::create_directories(config.checkpoint_dir);
        save_checkpoint(result.best, std::filesystem::path(config.checkpoint_dir) / "best.szdl");
      }
    } else if (++stale >= config.early_stop.patience) {
      history.stop_reason = "early-stop";
      break;
    }
  }
  if (history.stop_reason.empty()) history.stop_reason = "max-epochs";
  result.best.meta["history"] = to_json(history);
  if (!config.checkpoint_dir.empty()) {
    save_checkpoint(result.best, std::filesystem::path(config.checkpoint_dir) / "best.szdl");
    std::ofstream(std::filesystem::path(config.checkpoint_dir) / "history.csv") << history_csv(history);
  }
  return result;
}

}  // namespace

template <typename Real>
AdamState<Real> AdamState<Real>::init(const std::vector<Parameter<Real>>& params, AdamOptions options) {
  AdamState s;
  s.options = options;
  for (const auto& p : params) {
    s.m.emplace_back(p.tensor.size(), Real(0));
    s.v.emplace_back(p.tensor.size(), Real(0));
  }
  return s;
}

template <typename Real>
void adam_step(std::vector<Parameter<Real>>& params, AdamState<Real>& state, double lr) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw Error(ErrorCode::ShapeMismatch, "Adam state does not match the parameter list");
  }
  for (const auto& p : params) {
    for (Real g : p.tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw Error(ErrorCode::NonFiniteGradient, "non-finite gradient in " + p.name);
      }
    }
  }
  const AdamOptions& o = state.options;
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].tensor.values();
    const auto grad = std::as_const(params[i].tensor).grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (grad.size() != theta.size()) {
      // Never-touched parameter: zero gradient.
      for (std::size_t k = 0; k < theta.size(); ++k) {
        m[k] = static_cast<Real>(o.beta1 * static_cast<double>(m[k]));
        v[k] = static_cast<Real>(o.beta2 * static_cast<double>(v[k]));
        const double step = (static_cast<double>(m[k]) / c1) / (std::sqrt(static_cast<double>(v[k]) / c2) + o.eps);
        theta[k] = static_cast<Real>(static_cast<double>(theta[k]) - lr * step);
      }
      continue;
    }
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double g = static_cast<double>(grad[k]);
      const double mk = o.beta1 * static_cast<double>(m[k]) + (1.0 - o.beta1) * g;
      const double vk = o.beta2 * static_cast<double>(v[k]) + (1.0 - o.beta2) * g * g;
      m[k] = static_cast<Real>(mk);
      v[k] = static_cast<Real>(vk);
      const double step = (mk / c1) / (std::sqrt(vk / c2) + o.eps);
      theta[k] = static_cast<Real>(static_cast<double>(theta[k]) - lr * step);
    }
  }
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw Error(ErrorCode::ConfigError, "learning_rate must be positive");
  }
  if (batch_size < 1) throw Error(ErrorCode::ConfigError, "batch_size must be >= 1");
  if (early_stop.patience < 1) throw Error(ErrorCode::ConfigError, "patience must be >= 1");
  if (!(early_stop.min_delta >= 0.0)) throw Error(ErrorCode::ConfigError, "min_delta must be >= 0");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0) || !(adam.eps > 0.0)) {
    throw Error(ErrorCode::ConfigError, "Adam needs 0 <= beta < 1 and eps > 0");
  }
  model.validate();
  augment_spec.validate();
}

nlohmann::json train_section_to_json(const TrainConfig& c) {
  return nlohmann::json{{"learning_rate", c.learning_rate},
                        {"batch_size", c.batch_size},
                        {"max_epochs", c.max_epochs},
                        {"patience", c.early_stop.patience},
                        {"min_delta", c.early_stop.min_delta},
                        {"precision", precision_name(c.precision)},
                        {"augment", c.augment},
                        {"adam_beta1", c.adam.beta1},
                        {"adam_beta2", c.adam.beta2},
                        {"adam_eps", c.adam.eps},
                        {"checkpoint_dir", c.checkpoint_dir}};
}

void train_section_from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw Error(ErrorCode::ConfigError, "train section must be an object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "max_epochs") c.max_epochs = v.get<std::size_t>();
      else if (key == "patience") c.early_stop.patience = v.get<std::size_t>();
      else if (key == "min_delta") c.early_stop.min_delta = v.get<double>();
      else if (key == "precision") {
        const auto s = v.get<std::string>();
        if (s == "float32") c.precision = Precision::Float32;
        else if (s == "float64") c.precision = Precision::Float64;
        else throw Error(ErrorCode::ConfigError, "precision must be float32 or float64");
      } else if (key == "augment") c.augment = v.get<bool>();
      else if (key == "adam_beta1") c.adam.beta1 = v.get<double>();
      else if (key == "adam_beta2") c.adam.beta2 = v.get<double>();
      else if (key == "adam_eps") c.adam.eps = v.get<double>();
      else if (key == "checkpoint_dir") c.checkpoint_dir = v.get<std::string>();
      else throw Error(ErrorCode::ConfigError, "unknown train key \"" + key + "\"");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("train section: ") + e.what());
  }
}

nlohmann::json to_json(const TrainHistory& h) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : h.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}, {"val_auc", e.val_auc}});
  }
  return nlohmann::json{{"epochs", epochs}, {"best_epoch", h.best_epoch}, {"stop_reason", h.stop_reason}};
}

TrainHistory history_from_json(const nlohmann::json& j) {
  TrainHistory h;
  try {
    for (const auto& e : j.at("epochs")) {
      h.epochs.push_back({e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(),
                          e.at("val_loss").get<double>(), e.at("val_auc").get<double>()});
    }
    h.best_epoch = j.at("best_epoch").get<std::size_t>();
    h.stop_reason = j.at("stop_reason").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptPayload, std::string("history: ") + e.what());
  }
  return h;
}

std::string history_csv(const TrainHistory& h) {
  std::string out = "epoch,train_loss,val_loss,val_auc\n";
  char line[160];
  for (const auto& e : h.epochs) {
    std::snprintf(line, sizeof(line), "%zu,%.17g,%.17g,%.17g\n", e.epoch, e.train_loss, e.val_loss, e.val_auc);
    out += line;
  }
  return out;
}

VolumeSource nifti_source(std::filesystem::path base_dir) {
  return [base = std::move(base_dir)](const ManifestRecord& r) {
    const std::filesystem::path p(r.scan_path);
    return nifti::load(p.is_absolute() ? p : base / p);
  };
}

FitResult fit(const TrainConfig& config, const DatasetManifest& manifest, const VolumeSource& source) {
  // lr = 0 is accepted here (a frozen run); configuration files require lr > 0.
  TrainConfig checked = config;
  if (checked.learning_rate == 0.0) checked.learning_rate = 1.0;
  checked.validate();
  manifest.validate();
  tune_allocator();
  if (config.precision == Precision::Float64) return fit_impl<double>(config, manifest, source);
  return fit_impl<float>(config, manifest, source);
}

template <typename Real>
Checkpoint make_checkpoint(const Model<Real>& model, const AdamState<Real>& adam, const TrainHistory& history,
                           std::size_t epoch) {
  Checkpoint c;
  c.meta["format"] = "szdl-checkpoint";
  c.meta["epoch"] = epoch;
  c.meta["history"] = to_json(history);
  c.meta["adam"] = {{"t", adam.t}, {"beta1", adam.options.beta1}, {"beta2", adam.options.beta2}, {"eps", adam.options.eps}};
  export_model(model, c);
  const auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    NamedArray m{"adam.m." + params[i].name, params[i].tensor.shape(), {}};
    NamedArray v{"adam.v." + params[i].name, params[i].tensor.shape(), {}};
    for (Real x : adam.m[i]) m.data.push_back(static_cast<float>(x));
    for (Real x : adam.v[i]) v.data.push_back(static_cast<float>(x));
    c.arrays.push_back(std::move(m));
    c.arrays.push_back(std::move(v));
  }
  return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  write_checkpoint(checkpoint, path);
}

template <typename Real>
LoadedCheckpoint<Real> restore_checkpoint(const Checkpoint& checkpoint) {
  Model<Real> model = import_model<Real>(checkpoint);
  AdamOptions options;
  std::uint64_t t = 0;
  std::size_t epoch = 0;
  TrainHistory history;
  try {
    const auto& a = checkpoint.meta.at("adam");
    options = {a.at("beta1").get<double>(), a.at("beta2").get<double>(), a.at("eps").get<double>()};
    t = a.at("t").get<std::uint64_t>();
    epoch = checkpoint.meta.at("epoch").get<std::size_t>();
    history = history_from_json(checkpoint.meta.at("history"));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptPayload, std::string("checkpoint metadata: ") + e.what());
  }
  AdamState<Real> adam = AdamState<Real>::init(model.parameters(), options);
  adam.t = t;
  const auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const NamedArray* m = checkpoint.find("adam.m." + params[i].name);
    const NamedArray* v = checkpoint.find("adam.v." + params[i].name);
    if (m == nullptr || v == nullptr || m->data.size() != adam.m[i].size() || v->data.size() != adam.v[i].size()) {
      throw Error(ErrorCode::CorruptPayload, "checkpoint lacks Adam moments for " + params[i].name);
    }
    for (std::size_t k = 0; k < adam.m[i].size(); ++k) {
      adam.m[i][k] = static_cast<Real>(m->data[k]);
      adam.v[i][k] = static_cast<Real>(v->data[k]);
    }
  }
  return LoadedCheckpoint<Real>{std::move(model), std::move(adam), std::move(history), epoch};
}

LoadedCheckpoint<float> load_checkpoint(const std::filesystem::path& path) {
  return restore_checkpoint<float>(read_checkpoint(path));
}

template <typename Real>
ScoredSet score_records(Model<Real>& model, const std::vector<ManifestRecord>& records, const VolumeSource& source,
                        std::size_t batch_size) {
  std::vector<Volume> volumes;
  std::vector<int> labels;
  ScoredSet s;
  for (const auto& r : records) {
    volumes.push_back(source(r));
    labels.push_back(r.label);
    s.ids.push_back(r.subject_id);
    s.sites.emplace_back(to_string(r.site));
  }
  if (records.empty()) return s;
  const auto pass = evaluate(model, volumes, labels, std::max<std::size_t>(1, batch_size));
  s.scores = pass.scores;
  s.labels = labels;
  return s;
}

GeneralizationResult run_generalization(const TrainConfig& config, const DatasetManifest& manifest, Site held_site,
                                        const VolumeSource& source) {
  const DatasetManifest split = hold_out_site(manifest, held_site, config.seed);
  GeneralizationResult g;
  g.fit = fit(config, split, source);
  auto loaded = restore_checkpoint<float>(g.fit.best);
  g.test_scores = score_records(loaded.model, split.select(Split::Test), source);
  g.report = evaluation_report(g.test_scores);
  g.report["held_out_site"] = std::string(to_string(held_site));
  nlohmann::json records = nlohmann::json::array();
  for (std::size_t i = 0; i < g.test_scores.size(); ++i) {
    records.push_back({{"subject_id", g.test_scores.ids[i]},
                       {"site", g.test_scores.sites[i]},
                       {"label", g.test_scores.labels[i]},
                       {"score", g.test_scores.scores[i]}});
  }
  g.report["test_records"] = records;
  g.report["best_epoch"] = g.fit.history.best_epoch;
  return g;
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step(std::vector<Parameter<float>>&, AdamState<float>&, double);
template void adam_step(std::vector<Parameter<double>>&, AdamState<double>&, double);
template Checkpoint make_checkpoint(const Model<float>&, const AdamState<float>&, const TrainHistory&, std::size_t);
template Checkpoint make_checkpoint(const Model<double>&, const AdamState<double>&, const TrainHistory&, std::size_t);
template LoadedCheckpoint<float> restore_checkpoint(const Checkpoint&);
template LoadedCheckpoint<double> restore_checkpoint(const Checkpoint&);
template ScoredSet score_records(Model<float>&, const std::vector<ManifestRecord>&, const VolumeSource&, std::size_t);
template ScoredSet score_records(Model<double>&, const std::vector<ManifestRecord>&, const VolumeSource&, std::size_t);

}  // namespace szdl
