// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

// Adam, the epoch loop with early stopping, checkpoints, and the held-out-site
// experiment.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "szdl/augment.hpp"
#include "szdl/checkpoint.hpp"
#include "szdl/evalstats.hpp"
#include "szdl/manifest.hpp"
#include "szdl/model.hpp"

namespace szdl {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Real>
struct AdamState {
  AdamOptions options;
  std::uint64_t t = 0;
  std::vector<std::vector<Real>> m;  // aligned with the parameter list
  std::vector<std::vector<Real>> v;

  /// Zeroed moments shaped like `params`.
  static AdamState init(const std::vector<Parameter<Real>>& params, AdamOptions options = {});
};

/// One bias-corrected Adam update from the gradients stored on `params`.
/// Throws NonFiniteGradient (before touching anything) on NaN/inf gradients.
template <typename Real>
void adam_step(std::vector<Parameter<Real>>& params, AdamState<Real>& state, double lr);

struct EarlyStopConfig {
  std::size_t patience = 20;
  double min_delta = 0.0;
};

enum class Precision { Float32, Float64 };

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 5;
  std::size_t max_epochs = 300;
  EarlyStopConfig early_stop;
  std::uint64_t seed = 0;
  Precision precision = Precision::Float32;
  bool augment = true;
  AugmentSpec augment_spec;
  AdamOptions adam;
  std::string checkpoint_dir;  // empty: keep the best checkpoint in memory only
  ModelConfig model;
  std::size_t workers = 1;  // augmentation threads; never changes results

  /// Throws ConfigError (and nested model/augment validation errors).
  void validate() const;
};

/// "train" section of the run config (everything but model, augment and workers).
nlohmann::json train_section_to_json(const TrainConfig& c);
void train_section_from_json(const nlohmann::json& j, TrainConfig& c);

struct EpochRecord {
  std::size_t epoch;  // 1-based
  double train_loss;
  double val_loss;
  double val_auc;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  std::string stop_reason;  // "early-stop" or "max-epochs"
};

nlohmann::json to_json(const TrainHistory& h);
TrainHistory history_from_json(const nlohmann::json& j);
/// epoch,train_loss,val_loss,val_auc with round-trip precision.
std::string history_csv(const TrainHistory& h);

using VolumeSource = std::function<Volume(const ManifestRecord&)>;
/// Loads record.scan_path relative to `base_dir` (absolute paths are kept).
VolumeSource nifti_source(std::filesystem::path base_dir);

struct FitResult {
  Checkpoint best;  // best-validation-loss model, Adam state and history
  TrainHistory history;
};

/// Trains on the manifest's train split, validating on val after every epoch.
/// Throws EmptySplit / SingleClassSplit.
FitResult fit(const TrainConfig& config, const DatasetManifest& manifest, const VolumeSource& source);

/// Packs model, optimizer and history into a checkpoint.
template <typename Real>
Checkpoint make_checkpoint(const Model<Real>& model, const AdamState<Real>& adam, const TrainHistory& history,
                           std::size_t epoch);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);

template <typename Real>
struct LoadedCheckpoint {
  Model<Real> model;
  AdamState<Real> adam;
  TrainHistory history;
  std::size_t epoch;
};
template <typename Real>
LoadedCheckpoint<Real> restore_checkpoint(const Checkpoint& checkpoint);
LoadedCheckpoint<float> load_checkpoint(const std::filesystem::path& path);

/// Eval-mode class-1 probabilities for `records`, with ids, labels and sites.
template <typename Real>
ScoredSet score_records(Model<Real>& model, const std::vector<ManifestRecord>& records, const VolumeSource& source,
                        std::size_t batch_size = 8);

struct GeneralizationResult {
  nlohmann::json report;  // evaluation_report + held_out_site + test subject list
  ScoredSet test_scores;
  FitResult fit;
};

/// hold_out_site + fit + evaluation on the held-out site. Throws UnknownSite.
GeneralizationResult run_generalization(const TrainConfig& config, const DatasetManifest& manifest, Site held_site,
                                        const VolumeSource& source);

}  // namespace szdl
