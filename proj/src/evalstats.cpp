// Copyright 2026 The szdl Authors
// SPDX-License-Identifier: Apache-2.0

#include "szdl/evalstats.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "szdl/common.hpp"

namespace szdl {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double psi(double pos, double neg) {
  if (pos > neg) return 1.0;
  if (pos == neg) return 0.5;
  return 0.0;
}

// Mean of psi over the opposite class, per case.
void components(const std::vector<double>& scores, const std::vector<int>& labels, std::vector<double>& v10,
                std::vector<double>& v01) {
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < scores.size(); ++i) (labels[i] == 1 ? pos : neg).push_back(scores[i]);
  v10.assign(pos.size(), 0.0);
  v01.assign(neg.size(), 0.0);
  for (std::size_t i = 0; i < pos.size(); ++i) {
    for (std::size_t j = 0; j < neg.size(); ++j) {
      const double k = psi(pos[i], neg[j]);
      v10[i] += k;
      v01[j] += k;
    }
  }
  for (double& v : v10) v /= static_cast<double>(neg.size());
  for (double& v : v01) v /= static_cast<double>(pos.size());
}

double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double covariance(const std::vector<double>& a, const std::vector<double>& b) {
  const double ma = mean(a), mb = mean(b);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - ma) * (b[i] - mb);
  return acc / static_cast<double>(a.size() - 1);
}

nlohmann::json optional_json(const std::optional<double>& v) {
  if (v) return *v;
  return "undefined";
}

nlohmann::json threshold_json(double t) {
  if (std::isinf(t)) return "inf";
  return t;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, e - b + 1);
}

}  // namespace

std::size_t ScoredSet::positives() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
}

std::size_t ScoredSet::negatives() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 0));
}

void ScoredSet::validate(bool both_classes) const {
  if (labels.size() != scores.size() || (!ids.empty() && ids.size() != scores.size()) ||
      (!sites.empty() && sites.size() != scores.size())) {
    throw Error(ErrorCode::MisalignedInputs, "scores, labels, ids and sites must have equal lengths");
  }
  for (int l : labels) {
    if (l != 0 && l != 1) throw Error(ErrorCode::BadLabel, "labels must be 0 or 1");
  }
  for (double s : scores) {
    if (!std::isfinite(s)) throw Error(ErrorCode::NonFiniteValue, "scores must be finite");
  }
  if (both_classes && (positives() == 0 || negatives() == 0)) {
    throw Error(ErrorCode::SingleClass, "both classes are required");
  }
}

std::vector<RocPoint> roc_curve(const ScoredSet& s) {
  s.validate(true);
  std::vector<std::size_t> order(s.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s.scores[a] > s.scores[b]; });
  const auto p = static_cast<double>(s.positives());
  const auto n = static_cast<double>(s.negatives());
  std::vector<RocPoint> points{{kInf, 0.0, 0.0}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double t = s.scores[order[i]];
    while (i < order.size() && s.scores[order[i]] == t) {
      (s.labels[order[i]] == 1 ? tp : fp) += 1;
      ++i;
    }
    points.push_back({t, static_cast<double>(fp) / n, static_cast<double>(tp) / p});
  }
  return points;
}

double auc(const ScoredSet& s) {
  s.validate(true);
  // Rank-sum with midranks for ties.
  std::vector<std::size_t> order(s.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s.scores[a] < s.scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && s.scores[order[j]] == s.scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (s.labels[order[k]] == 1) rank_sum += midrank;
    }
    i = j;
  }
  const auto p = static_cast<double>(s.positives());
  const auto n = static_cast<double>(s.negatives());
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

double trapezoid_area(const std::vector<RocPoint>& points) {
  double area = 0.0;
  for (std::size_t i = 1; i < points.size(); ++i) {
    area += (points[i].fpr - points[i - 1].fpr) * 0.5 * (points[i].tpr + points[i - 1].tpr);
  }
  return area;
}

ThresholdMetrics metrics_at(const ScoredSet& s, double threshold) {
  s.validate(false);
  ThresholdMetrics m;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const bool predicted = s.scores[i] >= threshold;
    if (s.labels[i] == 1) {
      (predicted ? m.tp : m.fn) += 1;
    } else {
      (predicted ? m.fp : m.tn) += 1;
    }
  }
  auto ratio = [](std::size_t a, std::size_t b) -> std::optional<double> {
    if (b == 0) return std::nullopt;
    return static_cast<double>(a) / static_cast<double>(b);
  };
  m.accuracy = ratio(m.tp + m.tn, s.size());
  m.sensitivity = ratio(m.tp, m.tp + m.fn);
  m.specificity = ratio(m.tn, m.tn + m.fp);
  return m;
}

OperatingPoint operating_point(const std::vector<RocPoint>& points) {
  if (points.empty()) throw Error(ErrorCode::InvalidArgument, "operating_point needs a non-empty curve");
  // J values that are equal as fractions can differ in the last ulp, so ties
  // are judged with a small tolerance before the lower threshold wins.
  constexpr double kTie = 1e-12;
  OperatingPoint best{kInf, 0.0, 0.0, -1.0};
  for (const RocPoint& p : points) {
    const double j = p.tpr + (1.0 - p.fpr);
    if (j > best.sens_plus_spec + kTie ||
        (std::fabs(j - best.sens_plus_spec) <= kTie && p.threshold < best.threshold)) {
      best = {p.threshold, p.tpr, 1.0 - p.fpr, j};
    }
  }
  return best;
}

DeLongResult delong_test(const std::vector<double>& scores_a, const std::vector<double>& scores_b,
                         const std::vector<int>& labels) {
  if (scores_a.size() != scores_b.size() || scores_a.size() != labels.size()) {
    throw Error(ErrorCode::MisalignedInputs, "delong_test needs aligned score and label vectors");
  }
  ScoredSet sa{scores_a, labels, {}, {}};
  ScoredSet sb{scores_b, labels, {}, {}};
  sa.validate(true);
  sb.validate(true);
  const std::size_t m = sa.positives();
  const std::size_t n = sa.negatives();
  if (m < 2 || n < 2) throw Error(ErrorCode::TooFewCases, "delong_test needs at least 2 cases per class");

  DeLongResult r;
  components(scores_a, labels, r.v10_a, r.v01_a);
  components(scores_b, labels, r.v10_b, r.v01_b);
  r.auc_a = mean(r.v10_a);
  r.auc_b = mean(r.v10_b);
  const double s10 = covariance(r.v10_a, r.v10_a) + covariance(r.v10_b, r.v10_b) - 2.0 * covariance(r.v10_a, r.v10_b);
  const double s01 = covariance(r.v01_a, r.v01_a) + covariance(r.v01_b, r.v01_b) - 2.0 * covariance(r.v01_a, r.v01_b);
  r.variance = std::max(0.0, s10 / static_cast<double>(m) + s01 / static_cast<double>(n));
  const double diff = r.auc_a - r.auc_b;
  if (r.variance == 0.0) {
    if (diff == 0.0) {
      r.status = DeLongStatus::EqualZeroVariance;
      r.p_two_sided = 1.0;
      r.p_one_sided = 0.5;
    } else {
      r.status = DeLongStatus::Degenerate;
      r.p_two_sided = 0.0;
      r.p_one_sided = diff > 0.0 ? 0.0 : 1.0;
    }
    return r;
  }
  const double z = diff / std::sqrt(r.variance);
  r.z = z;
  r.p_two_sided = std::min(1.0, std::erfc(std::fabs(z) / std::sqrt(2.0)));
  r.p_one_sided = 0.5 * std::erfc(z / std::sqrt(2.0));
  return r;
}

std::string_view to_string(DeLongStatus status) {
  switch (status) {
    case DeLongStatus::Ok:
      return "ok";
    case DeLongStatus::EqualZeroVariance:
      return "equal-zero-variance";
    case DeLongStatus::Degenerate:
      return "degenerate";
  }
  return "unknown";
}

KsResult ks_uniform(std::vector<double> samples) {
  if (samples.empty()) throw Error(ErrorCode::InvalidArgument, "ks_uniform needs samples");
  std::sort(samples.begin(), samples.end());
  const auto n = static_cast<double>(samples.size());
  double d = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double x = std::clamp(samples[i], 0.0, 1.0);
    d = std::max({d, static_cast<double>(i + 1) / n - x, x - static_cast<double>(i) / n});
  }
  // Kolmogorov distribution with the Stephens small-sample correction.
  const double lambda = (std::sqrt(n) + 0.12 + 0.11 / std::sqrt(n)) * d;
  double p = 0.0;
  if (lambda < 1e-3) {
    p = 1.0;
  } else {
    for (int k = 1; k <= 100; ++k) {
      const double term = 2.0 * ((k % 2 == 1) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
      p += term;
      if (std::fabs(term) < 1e-16) break;
    }
  }
  return {d, std::clamp(p, 0.0, 1.0)};
}

ScoredSet parse_scores_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::Truncated, "score file is empty");
  const auto header = split_csv_line(trim(line));
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[trim(header[i])] = i;
  for (const char* required : {"subject_id", "score", "label"}) {
    if (!col.count(required)) throw Error(ErrorCode::ConfigError, std::string("score file lacks column ") + required);
  }
  const bool has_site = col.count("site") > 0;
  ScoredSet s;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    line = trim(line);
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != header.size()) {
      throw Error(ErrorCode::MisalignedInputs, "row " + std::to_string(row) + " has " + std::to_string(f.size()) +
                                                   " fields, expected " + std::to_string(header.size()));
    }
    try {
      s.ids.push_back(trim(f[col["subject_id"]]));
      s.scores.push_back(std::stod(f[col["score"]]));
      s.labels.push_back(std::stoi(f[col["label"]]));
      if (has_site) s.sites.push_back(trim(f[col["site"]]));
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::InvalidArgument, "row " + std::to_string(row) + " is not numeric");
    }
  }
  s.validate(false);
  return s;
}

ScoredSet read_scores_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_scores_csv(buf.str());
}

std::string scores_to_csv(const ScoredSet& s) {
  s.validate(false);
  std::ostringstream out;
  out.precision(17);
  out << "subject_id,score,label" << (s.sites.empty() ? "" : ",site") << "\n";
  for (std::size_t i = 0; i < s.size(); ++i) {
    out << (s.ids.empty() ? "case" + std::to_string(i) : s.ids[i]) << "," << s.scores[i] << "," << s.labels[i];
    if (!s.sites.empty()) out << "," << s.sites[i];
    out << "\n";
  }
  return out.str();
}

void write_scores_csv(const ScoredSet& s, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << scores_to_csv(s);
}

ScoredSet align_to(const ScoredSet& a, const ScoredSet& b) {
  if (a.ids.empty() || b.ids.empty() || a.size() != b.size()) {
    throw Error(ErrorCode::MisalignedInputs, "score sets need subject ids and equal sizes to align");
  }
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (!index.emplace(b.ids[i], i).second) throw Error(ErrorCode::MisalignedInputs, "duplicate id " + b.ids[i]);
  }
  ScoredSet out;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto it = index.find(a.ids[i]);
    if (it == index.end()) throw Error(ErrorCode::MisalignedInputs, "id " + a.ids[i] + " missing from second set");
    if (b.labels[it->second] != a.labels[i]) throw Error(ErrorCode::MisalignedInputs, "label mismatch for " + a.ids[i]);
    out.ids.push_back(a.ids[i]);
    out.scores.push_back(b.scores[it->second]);
    out.labels.push_back(a.labels[i]);
    if (!b.sites.empty()) out.sites.push_back(b.sites[it->second]);
  }
  return out;
}

nlohmann::json evaluation_report(const ScoredSet& s) {
  const auto points = roc_curve(s);
  const auto op = operating_point(points);
  auto metrics_json = [&](double threshold) {
    const auto m = metrics_at(s, threshold);
    return nlohmann::json{{"threshold", threshold_json(threshold)},
                          {"accuracy", optional_json(m.accuracy)},
                          {"sensitivity", optional_json(m.sensitivity)},
                          {"specificity", optional_json(m.specificity)},
                          {"tp", m.tp},
                          {"fp", m.fp},
                          {"tn", m.tn},
                          {"fn", m.fn}};
  };
  nlohmann::json roc = nlohmann::json::array();
  for (const auto& p : points) roc.push_back({{"threshold", threshold_json(p.threshold)}, {"fpr", p.fpr}, {"tpr", p.tpr}});
  nlohmann::json op_json = metrics_json(op.threshold);
  op_json["sens_plus_spec"] = op.sens_plus_spec;
  return nlohmann::json{{"n", s.size()},
                        {"positives", s.positives()},
                        {"negatives", s.negatives()},
                        {"auc", auc(s)},
                        {"at_0_5", metrics_json(0.5)},
                        {"operating_point", op_json},
                        {"roc", roc}};
}

nlohmann::json to_json(const DeLongResult& r) {
  nlohmann::json j{{"auc_a", r.auc_a},
                   {"auc_b", r.auc_b},
                   {"auc_difference", r.auc_a - r.auc_b},
                   {"variance", r.variance},
                   {"p_two_sided", r.p_two_sided},
                   {"p_one_sided", r.p_one_sided},
                   {"status", std::string(to_string(r.status))}};
  j["z"] = r.z ? nlohmann::json(*r.z) : nlohmann::json("undefined");
  return j;
}

std::string roc_to_csv(const std::vector<RocPoint>& points) {
  std::ostringstream out;
  out.precision(17);
  out << "threshold,fpr,tpr\n";
  for (const auto& p : points) {
    if (std::isinf(p.threshold)) {
      out << "inf";
    } else {
      out << p.threshold;
    }
    out << "," << p.fpr << "," << p.tpr << "\n";
  }
  return out.str();
}

}  // namespace szdl
