// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace szdl {

enum class Site { COBRE, BrainGluSchi, NMorphCH, SYNTH };
enum class Split { Train, Val, Test, Unassigned };

std::string_view to_string(Site site);
std::string_view to_string(Split split);
Site parse_site(std::string_view text);    // throws UnknownSite
Split parse_split(std::string_view text);  // throws InvalidArgument

struct ManifestRecord {
  std::string subject_id;
  std::string scan_path;
  int label = 0;  // 0 control, 1 schizophrenia
  Site site = Site::SYNTH;
  Split split = Split::Unassigned;

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

/// Subject/scan/label/site/split records. A subject may own several scans;
/// all of them always share one split.
struct DatasetManifest {
  std::vector<ManifestRecord> records;

  std::size_t count(Split split) const;
  std::vector<ManifestRecord> select(Split split) const;
  bool has_site(Site site) const;

  /// Labels must be 0/1 and consistent per subject; a subject never spans splits.
  void validate() const;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// JSON array of {subject_id, scan_path, label, site, split}. Unknown keys are rejected.
std::string to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(std::string_view text);
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

struct SplitRatios {
  unsigned train = 8;
  unsigned val = 1;
  unsigned test = 1;
};

/// Stratified subject-level shuffle into train/val/test. Per label, the held-out
/// splits each receive floor(n_label * ratio / total) subjects and training keeps
/// the remainder, so 89 subjects of one label give 73/8/8 at 8:1:1. A non-zero
/// ratio split left empty on tiny manifests borrows one subject from training.
DatasetManifest assign_splits(const DatasetManifest& manifest, SplitRatios ratios, std::uint64_t seed);

/// All records of `site` go to test; remaining sites are split 9:1:0 into train/val.
DatasetManifest hold_out_site(const DatasetManifest& manifest, Site site, std::uint64_t seed);

}  // namespace szdl
