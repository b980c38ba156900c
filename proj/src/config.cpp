// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

#include "szdl/config.hpp"

#include <fstream>
#include <sstream>

namespace szdl {

void RunConfig::validate(bool check_paths) const {
  if (schema_version != kRunConfigSchema) {
    throw Error(ErrorCode::ConfigError, "unsupported run config schema_version " + std::to_string(schema_version));
  }
  train.validate();
  synth.phantom.validate();
  if (synth.count_per_class == 0) throw Error(ErrorCode::ConfigError, "synth.count_per_class must be positive");
  if (!check_paths) return;
  if (!paths.data_dir.empty() && !std::filesystem::is_directory(paths.data_dir)) {
    throw Error(ErrorCode::ConfigError, "paths.data_dir does not exist: " + paths.data_dir);
  }
  if (!paths.manifest.empty() && !std::filesystem::is_regular_file(paths.manifest)) {
    throw Error(ErrorCode::ConfigError, "paths.manifest does not exist: " + paths.manifest);
  }
}

nlohmann::json to_json(const RunConfig& c) {
  return {
      {"schema_version", c.schema_version},
      {"seed", c.seed},
      {"model", to_json(c.train.model)},
      {"train", train_section_to_json(c.train)},
      {"augment", to_json(c.train.augment_spec)},
      {"synth",
       {{"count_per_class", c.synth.count_per_class},
        {"size", c.synth.phantom.size},
        {"effect_size", c.synth.phantom.effect_size},
        {"noise_std", c.synth.phantom.noise_std}}},
      {"paths", {{"data_dir", c.paths.data_dir}, {"manifest", c.paths.manifest}, {"out_dir", c.paths.out_dir}}},
  };
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorCode::ConfigError, "run config must be a JSON object");
  RunConfig c;
  try {
    if (!j.contains("schema_version")) throw Error(ErrorCode::ConfigError, "run config lacks schema_version");
    for (const auto& [key, v] : j.items()) {
      if (key == "schema_version") {
        c.schema_version = v.get<int>();
      } else if (key == "seed") {
        c.seed = v.get<std::uint64_t>();
      } else if (key == "model") {
        c.train.model = model_config_from_json(v);
      } else if (key == "train") {
        train_section_from_json(v, c.train);
      } else if (key == "augment") {
        c.train.augment_spec = augment_spec_from_json(v);
      } else if (key == "synth") {
        if (!v.is_object()) throw Error(ErrorCode::ConfigError, "synth section must be an object");
        for (const auto& [k, s] : v.items()) {
          if (k == "count_per_class") c.synth.count_per_class = s.get<std::size_t>();
          else if (k == "size") c.synth.phantom.size = s.get<std::size_t>();
          else if (k == "effect_size") c.synth.phantom.effect_size = s.get<double>();
          else if (k == "noise_std") c.synth.phantom.noise_std = s.get<double>();
          else throw Error(ErrorCode::ConfigError, "unknown synth key \"" + k + "\"");
        }
      } else if (key == "paths") {
        if (!v.is_object()) throw Error(ErrorCode::ConfigError, "paths section must be an object");
        for (const auto& [k, s] : v.items()) {
          if (k == "data_dir") c.paths.data_dir = s.get<std::string>();
          else if (k == "manifest") c.paths.manifest = s.get<std::string>();
          else if (k == "out_dir") c.paths.out_dir = s.get<std::string>();
          else throw Error(ErrorCode::ConfigError, "unknown paths key \"" + k + "\"");
        }
      } else {
        throw Error(ErrorCode::ConfigError, "unknown run config key \"" + key + "\"");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("run config: ") + e.what());
  }
  c.train.seed = c.seed;
  c.synth.phantom.seed = c.seed;
  c.validate(false);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::ConfigError, "cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(ss.str());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("config is not valid JSON: ") + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace szdl
