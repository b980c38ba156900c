// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

// ROC analysis, threshold metrics and DeLong's paired AUC comparison.

#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace szdl {

struct ScoredSet {
  std::vector<double> scores;
  std::vector<int> labels;            // 0 / 1
  std::vector<std::string> ids;       // optional, empty or aligned
  std::vector<std::string> sites;     // optional, empty or aligned

  std::size_t size() const { return scores.size(); }
  std::size_t positives() const;
  std::size_t negatives() const;
  /// MisalignedInputs on length mismatch, BadLabel on labels outside {0, 1};
  /// SingleClass when `both_classes` and a class is missing.
  void validate(bool both_classes) const;
};

struct RocPoint {
  double threshold;  // score >= threshold is positive; +inf for the (0, 0) start
  double fpr;
  double tpr;
};

/// One point per distinct score (descending), preceded by (0, 0) at +inf.
std::vector<RocPoint> roc_curve(const ScoredSet& s);
/// Mann-Whitney: P(pos > neg) + 0.5 P(pos == neg).
double auc(const ScoredSet& s);
double trapezoid_area(const std::vector<RocPoint>& points);

struct ThresholdMetrics {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  // nullopt when the denominator is zero.
  std::optional<double> accuracy;
  std::optional<double> sensitivity;
  std::optional<double> specificity;
};

ThresholdMetrics metrics_at(const ScoredSet& s, double threshold);

struct OperatingPoint {
  double threshold;
  double sensitivity;
  double specificity;
  double sens_plus_spec;
};

/// Maximizes sensitivity + specificity; ties go to the lower threshold.
OperatingPoint operating_point(const std::vector<RocPoint>& points);

enum class DeLongStatus {
  Ok,
  EqualZeroVariance,  // var == 0 and equal AUCs: p = 1
  Degenerate,         // var == 0 with unequal AUCs: no z
};

struct DeLongResult {
  double auc_a = 0.0;
  double auc_b = 0.0;
  double variance = 0.0;  // of auc_a - auc_b
  std::optional<double> z;
  double p_two_sided = 1.0;
  double p_one_sided = 0.5;  // H1: auc_a > auc_b
  DeLongStatus status = DeLongStatus::Ok;
  // Structural components, positives (v10) and negatives (v01), in input order.
  std::vector<double> v10_a, v10_b, v01_a, v01_b;
};

/// Throws MisalignedInputs, SingleClass or TooFewCases (< 2 per class).
DeLongResult delong_test(const std::vector<double>& scores_a, const std::vector<double>& scores_b,
                         const std::vector<int>& labels);

std::string_view to_string(DeLongStatus status);

/// Two-sided one-sample KS statistic and asymptotic p-value against U(0, 1).
struct KsResult {
  double statistic;
  double p_value;
};
KsResult ks_uniform(std::vector<double> samples);

/// CSV with header subject_id,score,label[,site].
ScoredSet read_scores_csv(const std::filesystem::path& path);
ScoredSet parse_scores_csv(const std::string& text);
std::string scores_to_csv(const ScoredSet& s);
void write_scores_csv(const ScoredSet& s, const std::filesystem::path& path);

/// Reorders b to a's subject order. Both need ids, the same id set and equal labels.
ScoredSet align_to(const ScoredSet& a, const ScoredSet& b);

/// auc, metrics at 0.5, operating point, ROC points. Undefined metrics are the
/// string "undefined"; the +inf threshold is written as "inf".
nlohmann::json evaluation_report(const ScoredSet& s);
nlohmann::json to_json(const DeLongResult& r);
std::string roc_to_csv(const std::vector<RocPoint>& points);

}  // namespace szdl
