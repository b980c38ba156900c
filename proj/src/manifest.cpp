// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

#include "szdl/manifest.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

#include "json.hpp"
#include "szdl/common.hpp"

namespace szdl {

using nlohmann::json;

std::string_view to_string(Site site) {
  switch (site) {
    case Site::COBRE: return "COBRE";
    case Site::BrainGluSchi: return "BrainGluSchi";
    case Site::NMorphCH: return "NMorphCH";
    case Site::SYNTH: return "SYNTH";
  }
  return "SYNTH";
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::Unassigned: return "unassigned";
  }
  return "unassigned";
}

Site parse_site(std::string_view text) {
  for (Site s : {Site::COBRE, Site::BrainGluSchi, Site::NMorphCH, Site::SYNTH}) {
    if (to_string(s) == text) return s;
  }
  throw Error(ErrorCode::UnknownSite, "unknown site '" + std::string(text) + "'");
}

Split parse_split(std::string_view text) {
  for (Split s : {Split::Train, Split::Val, Split::Test, Split::Unassigned}) {
    if (to_string(s) == text) return s;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown split '" + std::string(text) + "'");
}

std::size_t DatasetManifest::count(Split split) const {
  return static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [&](const auto& r) { return r.split == split; }));
}

std::vector<ManifestRecord> DatasetManifest::select(Split split) const {
  std::vector<ManifestRecord> out;
  std::copy_if(records.begin(), records.end(), std::back_inserter(out),
               [&](const auto& r) { return r.split == split; });
  return out;
}

bool DatasetManifest::has_site(Site site) const {
  return std::any_of(records.begin(), records.end(), [&](const auto& r) { return r.site == site; });
}

void DatasetManifest::validate() const {
  std::unordered_map<std::string, std::pair<int, Split>> subjects;
  for (const auto& r : records) {
    if (r.label != 0 && r.label != 1) {
      throw Error(ErrorCode::BadLabel, "label of '" + r.subject_id + "' must be 0 or 1");
    }
    auto [it, inserted] = subjects.try_emplace(r.subject_id, r.label, r.split);
    if (!inserted) {
      if (it->second.first != r.label) {
        throw Error(ErrorCode::BadLabel, "subject '" + r.subject_id + "' has scans with both labels");
      }
      if (it->second.second != r.split) {
        throw Error(ErrorCode::InvalidArgument, "subject '" + r.subject_id + "' spans two splits");
      }
    }
  }
}

std::string to_json(const DatasetManifest& manifest) {
  json arr = json::array();
  for (const auto& r : manifest.records) {
    arr.push_back({{"subject_id", r.subject_id},
                   {"scan_path", r.scan_path},
                   {"label", r.label},
                   {"site", std::string(to_string(r.site))},
                   {"split", std::string(to_string(r.split))}});
  }
  return arr.dump(2) + "\n";
}

DatasetManifest manifest_from_json(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!doc.is_array()) throw Error(ErrorCode::ConfigError, "manifest must be a JSON array");
  static const std::set<std::string> kKeys{"subject_id", "scan_path", "label", "site", "split"};
  DatasetManifest m;
  for (const auto& item : doc) {
    if (!item.is_object()) throw Error(ErrorCode::ConfigError, "manifest entries must be objects");
    for (const auto& [key, _] : item.items()) {
      if (!kKeys.contains(key)) throw Error(ErrorCode::ConfigError, "unknown manifest key '" + key + "'");
    }
    for (const auto& key : kKeys) {
      if (!item.contains(key)) throw Error(ErrorCode::ConfigError, "manifest entry missing '" + key + "'");
    }
    try {
      ManifestRecord r;
      r.subject_id = item.at("subject_id").get<std::string>();
      r.scan_path = item.at("scan_path").get<std::string>();
      r.label = item.at("label").get<int>();
      r.site = parse_site(item.at("site").get<std::string>());
      r.split = parse_split(item.at("split").get<std::string>());
      m.records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::ConfigError, std::string("bad manifest field type: ") + e.what());
    }
  }
  m.validate();
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return manifest_from_json(ss.str());
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write manifest " + path.string());
  out << to_json(manifest);
}

namespace {

struct LabelPool {
  std::vector<std::string> subjects;
  std::size_t val = 0;
  std::size_t test = 0;
};

// Gives one subject to an empty held-out split, from the label whose exact
// share has the largest fractional part.
void ensure_nonempty(std::array<LabelPool, 2>& pools, unsigned ratio, unsigned total,
                     std::size_t LabelPool::*field) {
  if (ratio == 0) return;
  if (pools[0].*field + pools[1].*field > 0) return;
  int best = -1;
  std::size_t best_rem = 0;
  std::size_t best_free = 0;
  for (int l = 0; l < 2; ++l) {
    const auto& p = pools[static_cast<std::size_t>(l)];
    const std::size_t free = p.subjects.size() - p.val - p.test;
    if (free < 2) continue;  // keep at least one training subject per label
    const std::size_t rem = (p.subjects.size() * ratio) % total;
    if (best < 0 || rem > best_rem || (rem == best_rem && free > best_free)) {
      best = l;
      best_rem = rem;
      best_free = free;
    }
  }
  if (best >= 0) ++(pools[static_cast<std::size_t>(best)].*field);
}

}  // namespace

DatasetManifest assign_splits(const DatasetManifest& manifest, SplitRatios ratios, std::uint64_t seed) {
  if (manifest.records.empty()) throw Error(ErrorCode::EmptyManifest, "no records to split");
  const unsigned total = ratios.train + ratios.val + ratios.test;
  if (total == 0) throw Error(ErrorCode::InvalidArgument, "split ratios sum to zero");

  DatasetManifest unassigned = manifest;
  for (auto& r : unassigned.records) r.split = Split::Unassigned;
  unassigned.validate();

  std::array<LabelPool, 2> pools;
  std::set<std::string> seen;
  for (const auto& r : unassigned.records) {
    if (seen.insert(r.subject_id).second) pools[static_cast<std::size_t>(r.label)].subjects.push_back(r.subject_id);
  }
  if (pools[0].subjects.empty() || pools[1].subjects.empty()) {
    throw Error(ErrorCode::SingleClass, "both labels must be present to stratify");
  }

  for (std::size_t l = 0; l < 2; ++l) {
    Rng rng(derive_seed(seed, {0x5b1175ULL, l}));
    std::shuffle(pools[l].subjects.begin(), pools[l].subjects.end(), rng);
    const std::size_t n = pools[l].subjects.size();
    pools[l].val = n * ratios.val / total;
    pools[l].test = n * ratios.test / total;
  }
  ensure_nonempty(pools, ratios.val, total, &LabelPool::val);
  ensure_nonempty(pools, ratios.test, total, &LabelPool::test);

  std::map<std::string, Split> assignment;
  for (const auto& p : pools) {
    for (std::size_t i = 0; i < p.subjects.size(); ++i) {
      Split s = Split::Train;
      if (i < p.val) {
        s = Split::Val;
      } else if (i < p.val + p.test) {
        s = Split::Test;
      }
      assignment[p.subjects[i]] = s;
    }
  }
  for (auto& r : unassigned.records) r.split = assignment.at(r.subject_id);
  return unassigned;
}

DatasetManifest hold_out_site(const DatasetManifest& manifest, Site site, std::uint64_t seed) {
  if (!manifest.has_site(site)) {
    throw Error(ErrorCode::UnknownSite, "site " + std::string(to_string(site)) + " has no records");
  }
  DatasetManifest rest;
  for (const auto& r : manifest.records) {
    if (r.site != site) rest.records.push_back(r);
  }
  if (rest.records.empty()) throw Error(ErrorCode::EmptySplit, "no records left to train on");
  rest = assign_splits(rest, SplitRatios{9, 1, 0}, seed);

  DatasetManifest out;
  std::size_t next = 0;
  for (const auto& r : manifest.records) {
    if (r.site == site) {
      ManifestRecord held = r;
      held.split = Split::Test;
      out.records.push_back(std::move(held));
    } else {
      out.records.push_back(rest.records[next++]);
    }
  }
  out.validate();
  return out;
}

}  // namespace szdl
