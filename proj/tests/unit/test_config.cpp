// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <fstream>

#include "szdl/config.hpp"
#include "test_util.hpp"

namespace szdl {
namespace {

RunConfig small_config() {
  RunConfig c;
  c.seed = 42;
  c.train.model.input_extent = 48;
  c.train.model.width_den = 8;
  c.train.model.se_ratio = 8;
  c.train.learning_rate = 2e-4;
  c.train.max_epochs = 12;
  c.synth.count_per_class = 20;
  c.synth.phantom.noise_std = 0.08;
  c.paths.out_dir = "runs/a";
  return c;
}

TEST(RunConfigTest, JsonRoundTrip) {
  const RunConfig c = small_config();
  const auto j = to_json(c);
  const RunConfig back = run_config_from_json(j);
  EXPECT_EQ(to_json(back), j);
  EXPECT_EQ(back.seed, 42U);
  EXPECT_EQ(back.train.seed, 42U);
  EXPECT_EQ(back.synth.phantom.seed, 42U);
  EXPECT_EQ(back.train.model.width_den, 8U);
  EXPECT_EQ(back.train.max_epochs, 12U);
  EXPECT_EQ(back.synth.phantom.noise_std, 0.08);
  EXPECT_EQ(back.paths.out_dir, "runs/a");
}

TEST(RunConfigTest, SectionsAreOptional) {
  const RunConfig c = run_config_from_json(nlohmann::json{{"schema_version", kRunConfigSchema}});
  EXPECT_EQ(to_json(c), to_json(RunConfig{}));
}

TEST(RunConfigTest, UnknownKeysAreRejectedEverywhere) {
  const auto base = to_json(small_config());
  for (const char* section : {"", "model", "train", "augment", "synth", "paths"}) {
    auto j = base;
    if (*section == '\0') {
      j["sed"] = 1;
    } else {
      j[section]["typo_key"] = 1;
    }
    EXPECT_SZDL_ERROR(run_config_from_json(j), ErrorCode::ConfigError);
  }
}

TEST(RunConfigTest, SchemaVersionAndTypes) {
  auto j = to_json(small_config());
  j.erase("schema_version");
  EXPECT_SZDL_ERROR(run_config_from_json(j), ErrorCode::ConfigError);
  j = to_json(small_config());
  j["schema_version"] = kRunConfigSchema + 1;
  EXPECT_SZDL_ERROR(run_config_from_json(j), ErrorCode::ConfigError);
  j = to_json(small_config());
  j["seed"] = "forty-two";
  EXPECT_SZDL_ERROR(run_config_from_json(j), ErrorCode::ConfigError);
  j = to_json(small_config());
  j["synth"]["count_per_class"] = 0;
  EXPECT_SZDL_ERROR(run_config_from_json(j), ErrorCode::ConfigError);
  EXPECT_SZDL_ERROR(run_config_from_json(nlohmann::json::array()), ErrorCode::ConfigError);
}

TEST(RunConfigTest, NestedValidationErrorsPropagate) {
  auto j = to_json(small_config());
  j["model"]["se_ratio"] = 7;
  EXPECT_SZDL_ERROR(run_config_from_json(j), ErrorCode::IndivisibleSERatio);
  j = to_json(small_config());
  j["train"]["learning_rate"] = -1.0;
  EXPECT_SZDL_ERROR(run_config_from_json(j), ErrorCode::ConfigError);
}

TEST(RunConfigTest, FilesAndPaths) {
  const auto dir = test_dir("run_config");
  std::ofstream(dir / "ok.json") << to_json(small_config()).dump(2);
  EXPECT_EQ(load_run_config(dir / "ok.json").seed, 42U);
  std::ofstream(dir / "broken.json") << "{\"schema_version\": 1,";
  EXPECT_SZDL_ERROR(load_run_config(dir / "broken.json"), ErrorCode::ConfigError);
  EXPECT_SZDL_ERROR(load_run_config(dir / "missing.json"), ErrorCode::ConfigError);

  RunConfig c = small_config();
  c.paths.data_dir = (dir / "nowhere").string();
  EXPECT_NO_THROW(c.validate(false));
  EXPECT_SZDL_ERROR(c.validate(true), ErrorCode::ConfigError);
  c.paths.data_dir = dir.string();
  EXPECT_NO_THROW(c.validate(true));
}

TEST(ExitCodes, Classes) {
  EXPECT_EQ(exit_code_for(ErrorCode::ConfigError), 1);
  EXPECT_EQ(exit_code_for(ErrorCode::IndivisibleSERatio), 1);
  EXPECT_EQ(exit_code_for(ErrorCode::BadMagic), 2);
  EXPECT_EQ(exit_code_for(ErrorCode::IoError), 2);
  EXPECT_EQ(exit_code_for(ErrorCode::EmptySplit), 2);
  EXPECT_EQ(exit_code_for(ErrorCode::NonFiniteLoss), 3);
  EXPECT_EQ(exit_code_for(ErrorCode::NonFiniteGradient), 3);
  EXPECT_EQ(exit_code_for(ErrorCode::TooFewCases), 3);
}

}  // namespace
}  // namespace szdl
