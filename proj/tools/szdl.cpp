// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

// szdl: synthesize, split, train, evaluate, compare and explain.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "szdl/augment.hpp"
#include "szdl/config.hpp"
#include "szdl/evalstats.hpp"
#include "szdl/gradcam.hpp"
#include "szdl/gradcheck.hpp"
#include "szdl/manifest.hpp"
#include "szdl/nifti.hpp"
#include "szdl/phantom.hpp"
#include "szdl/trainer.hpp"

namespace fs = std::filesystem;
using namespace szdl;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::string out = ".";
};

RunConfig resolve_config(const Globals& g) {
  RunConfig c = g.config_path.empty() ? RunConfig{} : load_run_config(g.config_path);
  if (g.seed) {
    c.seed = *g.seed;
    c.train.seed = *g.seed;
    c.synth.phantom.seed = *g.seed;
  }
  if (g.workers) c.train.workers = *g.workers;
  c.validate(true);
  return c;
}

fs::path out_dir(const Globals& g) {
  fs::path dir(g.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

// Scan paths resolve against paths.data_dir when set, else the manifest's directory.
VolumeSource source_for(const RunConfig& c, const fs::path& manifest_path) {
  if (!c.paths.data_dir.empty()) return nifti_source(c.paths.data_dir);
  return nifti_source(manifest_path.parent_path());
}

std::string manifest_arg(const std::string& positional, const RunConfig& c) {
  if (!positional.empty()) return positional;
  if (!c.paths.manifest.empty()) return c.paths.manifest;
  throw Error(ErrorCode::ConfigError, "no manifest given (positional argument or paths.manifest)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"3D SE-VGG-11BN classification pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "Run config JSON");
  app.add_option("--seed", g.seed, "Seed for all randomness (overrides the config)");
  app.add_option("--workers", g.workers, "Augmentation threads (results do not depend on it)");
  app.add_option("--out", g.out, "Output directory");

  // synth
  auto* synth = app.add_subcommand("synth", "Write a synthetic phantom dataset and its manifest");
  std::optional<std::size_t> synth_count, synth_size;
  std::optional<double> synth_effect, synth_noise;
  std::string synth_site = "SYNTH", synth_prefix = "sub";
  bool synth_append = false;
  synth->add_option("--count", synth_count, "Volumes per class");
  synth->add_option("--size", synth_size, "Cubic extent in voxels");
  synth->add_option("--effect-size", synth_effect, "Relative cavity enlargement of class 1");
  synth->add_option("--noise-std", synth_noise, "Additive Gaussian noise");
  synth->add_option("--site", synth_site, "Site tag for the records");
  synth->add_option("--prefix", synth_prefix, "Subject id prefix");
  synth->add_flag("--append", synth_append, "Merge into an existing manifest.json in the output directory");

  // split
  auto* split = app.add_subcommand("split", "Assign 8:1:1 train/val/test splits, or hold out one site");
  std::string split_manifest, split_hold;
  split->add_option("manifest", split_manifest, "Input manifest")->required();
  split->add_option("--hold-out", split_hold, "Site used only for testing");

  // train
  auto* train = app.add_subcommand("train", "Train on the train split, keeping the best validation checkpoint");
  std::string train_manifest;
  train->add_option("manifest", train_manifest, "Split manifest");

  // eval
  auto* eval = app.add_subcommand("eval", "ROC/AUC report from a score file or a checkpoint on a split");
  std::string eval_scores, eval_checkpoint, eval_manifest, eval_split = "test";
  eval->add_option("--scores", eval_scores, "CSV with subject_id,score,label[,site]");
  eval->add_option("checkpoint", eval_checkpoint, "Checkpoint (.szdl)");
  eval->add_option("manifest", eval_manifest, "Split manifest");
  eval->add_option("--split", eval_split, "Split to score");

  // cam
  auto* cam = app.add_subcommand("cam", "Grad-CAM volumes, mid-slice images and their average");
  std::string cam_checkpoint;
  std::vector<std::string> cam_volumes;
  int cam_target = 1;
  double cam_threshold = 0.85;
  std::string cam_score = "logit";
  cam->add_option("checkpoint", cam_checkpoint, "Checkpoint (.szdl)")->required();
  cam->add_option("volumes", cam_volumes, "NIfTI volumes")->required();
  cam->add_option("--target", cam_target, "Target class");
  cam->add_option("--threshold", cam_threshold, "Threshold for the mask volume");
  cam->add_option("--score", cam_score, "logit or probability")->check(CLI::IsMember({"logit", "probability"}));

  // compare
  auto* compare = app.add_subcommand("compare", "DeLong test between two score files on the same subjects");
  std::string cmp_a, cmp_b;
  compare->add_option("scores_a", cmp_a, "First score CSV")->required();
  compare->add_option("scores_b", cmp_b, "Second score CSV")->required();

  // augment-preview
  auto* preview = app.add_subcommand("augment-preview", "Apply the augmentation pipeline once and save before/after");
  std::string preview_volume;
  preview->add_option("volume", preview_volume, "NIfTI volume")->required();

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every layer and the toy model");
  std::size_t gc_samples = 100;
  gradcheck->add_option("--samples", gc_samples, "Coordinates per layer");

  // generalize
  auto* generalize = app.add_subcommand("generalize", "Train on all but one site and test on it");
  std::string gen_manifest, gen_site;
  generalize->add_option("manifest", gen_manifest, "Manifest with site tags");
  generalize->add_option("--hold-out", gen_site, "Held-out site")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    const RunConfig config = resolve_config(g);

    if (*synth) {
      SynthOptions so;
      so.count_per_class = synth_count.value_or(config.synth.count_per_class);
      so.phantom = config.synth.phantom;
      if (synth_size) so.phantom.size = *synth_size;
      if (synth_effect) so.phantom.effect_size = *synth_effect;
      if (synth_noise) so.phantom.noise_std = *synth_noise;
      so.site = parse_site(synth_site);
      so.id_prefix = synth_prefix;
      const fs::path dir = out_dir(g);
      std::optional<DatasetManifest> existing;
      if (synth_append && fs::exists(dir / "manifest.json")) existing = load_manifest(dir / "manifest.json");
      DatasetManifest m = synthesize_dataset(so, dir);
      if (existing) {
        existing->records.insert(existing->records.end(), m.records.begin(), m.records.end());
        existing->validate();
        save_manifest(*existing, dir / "manifest.json");
        m = *existing;
      }
      std::printf("wrote %zu records to %s\n", m.records.size(), (dir / "manifest.json").string().c_str());
    } else if (*split) {
      const DatasetManifest in = load_manifest(split_manifest);
      const DatasetManifest outm =
          split_hold.empty() ? assign_splits(in, SplitRatios{}, config.seed) : hold_out_site(in, parse_site(split_hold), config.seed);
      const fs::path path = out_dir(g) / "manifest.json";
      save_manifest(outm, path);
      std::printf("train %zu val %zu test %zu -> %s\n", outm.count(Split::Train), outm.count(Split::Val),
                  outm.count(Split::Test), path.string().c_str());
    } else if (*train) {
      const fs::path mpath = manifest_arg(train_manifest, config);
      const DatasetManifest m = load_manifest(mpath);
      TrainConfig tc = config.train;
      tc.checkpoint_dir = out_dir(g).string();
      write_text(fs::path(tc.checkpoint_dir) / "config.json", to_json(config).dump(2) + "\n");
      const FitResult r = fit(tc, m, source_for(config, mpath));
      std::printf("best epoch %zu of %zu (%s)\n", r.history.best_epoch, r.history.epochs.size(),
                  r.history.stop_reason.c_str());
    } else if (*eval) {
      ScoredSet scores;
      if (!eval_scores.empty()) {
        scores = read_scores_csv(eval_scores);
      } else {
        if (eval_checkpoint.empty()) throw Error(ErrorCode::ConfigError, "eval needs --scores or a checkpoint");
        const fs::path mpath = manifest_arg(eval_manifest, config);
        auto loaded = load_checkpoint(eval_checkpoint);
        const DatasetManifest m = load_manifest(mpath);
        scores = score_records(loaded.model, m.select(parse_split(eval_split)), source_for(config, mpath));
      }
      const fs::path dir = out_dir(g);
      const auto report = evaluation_report(scores);
      write_text(dir / "report.json", report.dump(2) + "\n");
      write_text(dir / "roc.csv", roc_to_csv(roc_curve(scores)));
      write_scores_csv(scores, dir / "scores.csv");
      std::printf("auc %.6f on %zu cases\n", report.at("auc").get<double>(), scores.scores.size());
    } else if (*cam) {
      auto loaded = load_checkpoint(cam_checkpoint);
      const fs::path dir = out_dir(g);
      const CamScore score = cam_score == "logit" ? CamScore::Logit : CamScore::Probability;
      std::vector<CamVolume> cams;
      for (const auto& path : cam_volumes) {
        const Volume v = nifti::load(path);
        cams.push_back(grad_cam(loaded.model, v, cam_target, score));
        const std::string stem = fs::path(path).stem().string();
        export_cam(cams.back(), dir / (stem + "_cam.nii"));
        write_mid_slices(cams.back().values, dir / (stem + "_cam"));
        if (cams.back().degenerate) std::fprintf(stderr, "warning: degenerate CAM for %s\n", path.c_str());
      }
      const CamVolume avg = average_cam(cams);
      export_cam(avg, dir / "average_cam.nii");
      write_mid_slices(avg.values, dir / "average_cam");
      Volume mask(avg.values.extents(), avg.values.voxel_size());
      const auto bits = threshold_cam(avg, cam_threshold);
      for (std::size_t i = 0; i < bits.size(); ++i) mask.data()[i] = bits[i];
      nifti::save(mask, dir / "average_cam_mask.nii");
      std::printf("%zu CAMs from %s\n", cams.size(), avg.source_layer.c_str());
    } else if (*compare) {
      const ScoredSet a = read_scores_csv(cmp_a);
      const ScoredSet b = align_to(a, read_scores_csv(cmp_b));
      const DeLongResult r = delong_test(a.scores, b.scores, a.labels);
      write_text(out_dir(g) / "delong.json", to_json(r).dump(2) + "\n");
      std::printf("auc_a %.6f auc_b %.6f p %.6g\n", r.auc_a, r.auc_b, r.p_two_sided);
    } else if (*preview) {
      const Volume v = nifti::load(preview_volume);
      Rng rng(derive_seed(config.seed, {0x9e71ULL}));
      const AugmentResult r = apply_pipeline(v, config.train.augment_spec, rng);
      const fs::path dir = out_dir(g);
      nifti::save(v, dir / "before.nii");
      nifti::save(r.volume, dir / "after.nii");
      const auto& t = r.applied;
      const nlohmann::json applied{{"blur", t.blur},     {"noise", t.noise}, {"affine", t.affine},
                                   {"elastic", t.elastic}, {"bias", t.bias},   {"motion", t.motion}};
      write_text(dir / "applied.json", applied.dump(2) + "\n");
      std::printf("%s\n", applied.dump().c_str());
    } else if (*gradcheck) {
      GradCheckOptions opts;
      opts.samples = gc_samples;
      const auto reports = run_gradient_suite(config.seed, opts);
      const auto j = to_json(reports);
      write_text(out_dir(g) / "gradcheck.json", j.dump(2) + "\n");
      for (const auto& r : reports) {
        std::printf("%-28s %4zu coords  max rel %.3g  %s\n", r.name.c_str(), r.coordinates, r.max_rel_error,
                    r.passed ? "ok" : "FAIL");
      }
      if (!j.at("all_passed").get<bool>()) return 3;
    } else if (*generalize) {
      const fs::path mpath = manifest_arg(gen_manifest, config);
      const DatasetManifest m = load_manifest(mpath);
      TrainConfig tc = config.train;
      tc.checkpoint_dir = out_dir(g).string();
      const auto r = run_generalization(tc, m, parse_site(gen_site), source_for(config, mpath));
      const fs::path dir(tc.checkpoint_dir);
      write_text(dir / "generalization.json", r.report.dump(2) + "\n");
      write_scores_csv(r.test_scores, dir / "scores.csv");
      std::printf("held-out %s auc %.6f\n", gen_site.c_str(), r.report.at("auc").get<double>());
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
