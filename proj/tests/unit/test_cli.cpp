// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "szdl/config.hpp"
#include "szdl/evalstats.hpp"
#include "szdl/manifest.hpp"
#include "szdl/nifti.hpp"
#include "szdl/phantom.hpp"
#include "szdl/trainer.hpp"
#include "test_util.hpp"

namespace szdl {
namespace {

namespace fs = std::filesystem;

// Runs the CLI with `args`; stdout and stderr go to <dir>/log.txt.
int run_cli(const fs::path& dir, const std::string& args) {
  const std::string cmd = std::string("\"") + SZDL_CLI_PATH + "\" " + args + " > \"" + (dir / "log.txt").string() +
                          "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

void write_file(const fs::path& path, const std::string& text) { std::ofstream(path, std::ios::binary) << text; }

fs::path tiny_config(const fs::path& dir) {
  RunConfig c;
  c.seed = 3;
  c.train.model.input_extent = 32;
  c.train.model.width_den = 16;
  c.train.model.se_ratio = 4;
  c.train.max_epochs = 1;
  c.train.learning_rate = 1e-3;
  const fs::path path = dir / "config.json";
  write_file(path, to_json(c).dump(2));
  return path;
}

TEST(Cli, SynthWritesVolumesAndManifest) {
  const auto dir = test_dir("cli_synth");
  ASSERT_EQ(run_cli(dir, "synth --count 5 --size 16 --seed 4 --out " + q(dir / "a")), 0) << slurp(dir / "log.txt");
  std::size_t nii = 0;
  for (const auto& e : fs::directory_iterator(dir / "a")) nii += e.path().extension() == ".nii" ? 1 : 0;
  EXPECT_EQ(nii, 10U);
  const auto m = load_manifest(dir / "a" / "manifest.json");
  ASSERT_EQ(m.records.size(), 10U);
  int ones = 0;
  for (const auto& r : m.records) ones += r.label;
  EXPECT_EQ(ones, 5);

  ASSERT_EQ(run_cli(dir, "synth --count 5 --size 16 --seed 4 --out " + q(dir / "b")), 0);
  for (const auto& e : fs::directory_iterator(dir / "a")) {
    EXPECT_EQ(slurp(e.path()), slurp(dir / "b" / e.path().filename())) << e.path().filename();
  }
}

TEST(Cli, SynthLabelsFollowCavityCount) {
  const auto dir = test_dir("cli_synth_labels");
  ASSERT_EQ(run_cli(dir, "synth --count 6 --size 32 --effect-size 1.0 --seed 8 --out " + q(dir)), 0);
  const auto m = load_manifest(dir / "manifest.json");
  const auto central = central_region_mask(32);
  double dark[2] = {0, 0};
  for (const auto& r : m.records) {
    const Volume v = nifti::load(dir / r.scan_path);
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (central[i] && v.data()[i] < 0.2F) dark[r.label] += 1.0;
    }
  }
  EXPECT_GT(dark[1], dark[0]);
}

TEST(Cli, SplitEvalCompareAndIdempotence) {
  const auto dir = test_dir("cli_eval");
  ASSERT_EQ(run_cli(dir, "synth --count 10 --size 16 --out " + q(dir / "data")), 0);
  ASSERT_EQ(run_cli(dir, "split " + q(dir / "data" / "manifest.json") + " --out " + q(dir / "split")), 0)
      << slurp(dir / "log.txt");
  const auto split = load_manifest(dir / "split" / "manifest.json");
  EXPECT_EQ(split.count(Split::Unassigned), 0U);
  EXPECT_GT(split.count(Split::Test), 0U);

  write_file(dir / "perfect.csv", "subject_id,score,label\na,0.9,1\nb,0.8,1\nc,0.3,0\nd,0.1,0\n");
  ASSERT_EQ(run_cli(dir, "eval --scores " + q(dir / "perfect.csv") + " --out " + q(dir / "e1")), 0)
      << slurp(dir / "log.txt");
  const auto report = nlohmann::json::parse(slurp(dir / "e1" / "report.json"));
  EXPECT_EQ(report.at("auc").get<double>(), 1.0);
  EXPECT_EQ(slurp(dir / "e1" / "roc.csv").rfind("threshold,fpr,tpr", 0), 0U);
  ASSERT_EQ(run_cli(dir, "eval --scores " + q(dir / "perfect.csv") + " --out " + q(dir / "e2")), 0);
  EXPECT_EQ(slurp(dir / "e1" / "report.json"), slurp(dir / "e2" / "report.json"));

  ASSERT_EQ(run_cli(dir, "compare " + q(dir / "perfect.csv") + " " + q(dir / "perfect.csv") + " --out " + q(dir)), 0)
      << slurp(dir / "log.txt");
  const auto delong = nlohmann::json::parse(slurp(dir / "delong.json"));
  EXPECT_EQ(delong.at("p_two_sided").get<double>(), 1.0);
}

TEST(Cli, TrainEvalCamPreviewEndToEnd) {
  const auto dir = test_dir("cli_train");
  const auto config = tiny_config(dir);
  ASSERT_EQ(run_cli(dir, "synth --count 10 --size 32 --out " + q(dir / "data")), 0);
  ASSERT_EQ(run_cli(dir, "split " + q(dir / "data" / "manifest.json") + " --out " + q(dir / "data")), 0);
  const auto manifest = q(dir / "data" / "manifest.json");
  ASSERT_EQ(run_cli(dir, "train " + manifest + " --config " + q(config) + " --out " + q(dir / "run")), 0)
      << slurp(dir / "log.txt");
  EXPECT_TRUE(fs::exists(dir / "run" / "best.szdl"));
  EXPECT_EQ(slurp(dir / "run" / "history.csv").rfind("epoch,train_loss,val_loss,val_auc\n", 0), 0U);
  EXPECT_NO_THROW(run_config_from_json(nlohmann::json::parse(slurp(dir / "run" / "config.json"))));

  ASSERT_EQ(run_cli(dir, "eval " + q(dir / "run" / "best.szdl") + " " + manifest + " --split test --config " +
                             q(config) + " --out " + q(dir / "eval")),
            0)
      << slurp(dir / "log.txt");
  EXPECT_TRUE(fs::exists(dir / "eval" / "scores.csv"));

  const auto m = load_manifest(dir / "data" / "manifest.json");
  const auto v1 = q(dir / "data" / m.records[0].scan_path);
  const auto v2 = q(dir / "data" / m.records[1].scan_path);
  ASSERT_EQ(run_cli(dir, "cam " + q(dir / "run" / "best.szdl") + " " + v1 + " " + v2 + " --out " + q(dir / "cam")), 0)
      << slurp(dir / "log.txt");
  for (const char* f : {"average_cam.nii", "average_cam_mask.nii", "average_cam_axial.pgm"}) {
    EXPECT_TRUE(fs::exists(dir / "cam" / f)) << f;
  }
  const Volume avg = nifti::load(dir / "cam" / "average_cam.nii");
  EXPECT_EQ(avg.extents(), (Extents{32, 32, 32}));
  EXPECT_LE(avg.max_value(), 1.0F);

  ASSERT_EQ(run_cli(dir, "augment-preview " + v1 + " --seed 5 --out " + q(dir / "prev")), 0) << slurp(dir / "log.txt");
  EXPECT_TRUE(fs::exists(dir / "prev" / "after.nii"));
  EXPECT_EQ(slurp(dir / "prev" / "before.nii"), slurp(dir / "data" / m.records[0].scan_path));
}

TEST(Cli, ExitCodes) {
  const auto dir = test_dir("cli_exit");
  EXPECT_EQ(run_cli(dir, ""), 1);
  EXPECT_EQ(run_cli(dir, "synth --no-such-flag"), 1);
  write_file(dir / "typo.json", "{\"schema_version\": 1, \"trian\": {}}");
  EXPECT_EQ(run_cli(dir, "synth --config " + q(dir / "typo.json") + " --out " + q(dir)), 1);
  EXPECT_NE(slurp(dir / "log.txt").find("trian"), std::string::npos);

  EXPECT_EQ(run_cli(dir, "eval --scores " + q(dir / "missing.csv") + " --out " + q(dir)), 2);
  write_file(dir / "bad.szdl", "XXXXnot a checkpoint");
  EXPECT_EQ(run_cli(dir, "cam " + q(dir / "bad.szdl") + " " + q(dir / "bad.szdl") + " --out " + q(dir)), 2);
  EXPECT_FALSE(slurp(dir / "log.txt").empty());

  // DeLong needs two cases per class.
  write_file(dir / "few.csv", "subject_id,score,label\na,0.9,1\nb,0.3,0\nc,0.2,0\n");
  EXPECT_EQ(run_cli(dir, "compare " + q(dir / "few.csv") + " " + q(dir / "few.csv") + " --out " + q(dir)), 3);
}

TEST(Cli, GradcheckPasses) {
  const auto dir = test_dir("cli_gradcheck");
  ASSERT_EQ(run_cli(dir, "gradcheck --samples 3 --out " + q(dir)), 0) << slurp(dir / "log.txt");
  const auto j = nlohmann::json::parse(slurp(dir / "gradcheck.json"));
  EXPECT_TRUE(j.at("all_passed").get<bool>());
}

TEST(Cli, GeneralizeHoldsOutASite) {
  const auto dir = test_dir("cli_generalize");
  const auto config = tiny_config(dir);
  const auto data = q(dir / "data");
  ASSERT_EQ(run_cli(dir, "synth --count 10 --size 32 --site COBRE --prefix cobre --out " + data), 0);
  ASSERT_EQ(run_cli(dir, "synth --count 10 --size 32 --noise-std 0.08 --seed 2 --site BrainGluSchi --prefix glu "
                         "--append --out " + data),
            0)
      << slurp(dir / "log.txt");
  ASSERT_EQ(load_manifest(dir / "data" / "manifest.json").records.size(), 40U);
  ASSERT_EQ(run_cli(dir, "generalize " + q(dir / "data" / "manifest.json") + " --hold-out BrainGluSchi --config " +
                             q(config) + " --out " + q(dir / "gen")),
            0)
      << slurp(dir / "log.txt");
  const auto report = nlohmann::json::parse(slurp(dir / "gen" / "generalization.json"));
  EXPECT_EQ(report.at("held_out_site"), "BrainGluSchi");
  for (const auto& r : report.at("test_records")) EXPECT_EQ(r.at("site"), "BrainGluSchi");
  EXPECT_EQ(run_cli(dir, "generalize " + q(dir / "data" / "manifest.json") + " --hold-out NMorphCH --config " +
                         q(config) + " --out " + q(dir / "gen2")),
            2);
}

}  // namespace
}  // namespace szdl
