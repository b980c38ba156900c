// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

// Versioned run configuration shared by every CLI command.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "szdl/phantom.hpp"
#include "szdl/trainer.hpp"

namespace szdl {

inline constexpr int kRunConfigSchema = 1;

struct RunPaths {
  std::string data_dir;  // base for relative scan paths
  std::string manifest;
  std::string out_dir;
};

struct SynthSection {
  std::size_t count_per_class = 200;
  PhantomSpec phantom;  // phantom.seed is overridden by the run seed
};

struct RunConfig {
  int schema_version = kRunConfigSchema;
  std::uint64_t seed = 0;
  TrainConfig train;  // carries the model and augment sections
  RunPaths paths;
  SynthSection synth;

  /// Throws ConfigError; with check_paths, also requires data_dir and manifest
  /// (when set) to exist.
  void validate(bool check_paths) const;
};

/// {"schema_version", "seed", "model", "train", "augment", "synth", "paths"}.
/// Every section is optional on input; unknown keys anywhere are rejected.
nlohmann::json to_json(const RunConfig& config);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace szdl
