#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cxrmt/error.hpp"
#include "cxrmt/rng.hpp"

namespace cxrmt {

// Mann-Whitney AUC: (concordant pairs + ties / 2) / (P N), from midranks.
inline double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw ShapeError("roc_auc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the positive rank sum keeps every quantity integral until the final division.
  double pos = 0, neg = 0, rank_sum2 = 0;
  for (std::size_t i = 0; i < order.size();) {
    if (std::isnan(scores[order[i]])) throw NumericsError("roc_auc: NaN score");
    std::size_t j = i;
    double group_pos = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) group_pos += labels[order[j++]] ? 1 : 0;
    rank_sum2 += group_pos * double(i + 1 + j);  // midrank (i+1+j)/2, doubled
    i = j;
  }
  for (auto l : labels) (l ? pos : neg) += 1;
  if (pos == 0 || neg == 0) throw UndefinedMetricError("roc_auc: needs at least one positive and one negative");
  const double u2 = rank_sum2 - pos * (pos + 1);
  return u2 / (2.0 * pos * neg);
}

inline double roc_auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
  return roc_auc(std::span<const double>(scores), std::span<const std::uint8_t>(labels));
}

struct Interval {
  double low = 0, high = 0;
};

// Nearest-rank percentile of a sorted sample, q in (0,1].
inline double nearest_rank(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw PreconditionError("nearest_rank: empty sample");
  const auto k = std::size_t(std::ceil(q * double(sorted.size()) - 1e-12));
  return sorted[std::clamp<std::size_t>(k, 1, sorted.size()) - 1];
}

// Case-resampling percentile bootstrap. Resamples without both classes are redrawn.
inline std::vector<double> bootstrap_aucs(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels,
                                          std::size_t resamples, std::uint64_t seed) {
  roc_auc(scores, labels);  // the full set must be scoreable
  const std::size_t n = scores.size();
  Rng rng(seed);
  std::vector<double> aucs, s(n);
  std::vector<std::uint8_t> l(n);
  aucs.reserve(resamples);
  while (aucs.size() < resamples) {
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto k = rng.index(n);
      s[i] = scores[k];
      l[i] = labels[k];
      pos += l[i];
    }
    if (pos == 0 || pos == n) continue;
    aucs.push_back(roc_auc(s, l));
  }
  std::sort(aucs.begin(), aucs.end());
  return aucs;
}

inline Interval bootstrap_ci(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels,
                             std::size_t resamples = 1000, double alpha = 0.05, std::uint64_t seed = 0) {
  if (resamples == 0) throw PreconditionError("bootstrap_ci: resamples must be positive");
  if (!(alpha > 0.0 && alpha < 1.0)) throw PreconditionError("bootstrap_ci: alpha must lie in (0,1)");
  const auto aucs = bootstrap_aucs(scores, labels, resamples, seed);
  return {nearest_rank(aucs, alpha / 2.0), nearest_rank(aucs, 1.0 - alpha / 2.0)};
}

// Per-class scores and labels, classes in first-seen order.
struct ScoredSet {
  std::vector<std::string> classes;
  std::vector<std::vector<double>> scores;
  std::vector<std::vector<std::uint8_t>> labels;
  std::vector<std::vector<std::string>> case_ids;

  void add(const std::string& case_id, const std::string& cls, double score, std::uint8_t label) {
    auto it = std::find(classes.begin(), classes.end(), cls);
    std::size_t k = std::size_t(it - classes.begin());
    if (it == classes.end()) {
      classes.push_back(cls);
      scores.emplace_back();
      labels.emplace_back();
      case_ids.emplace_back();
    }
    scores[k].push_back(score);
    labels[k].push_back(label);
    case_ids[k].push_back(case_id);
  }
};

struct ClassAuc {
  std::string abnormality;
  std::size_t positives = 0, negatives = 0;
  double auc = std::numeric_limits<double>::quiet_NaN();
  Interval ci{std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
};

// Classes without both labels report NaN rather than failing the whole table.
inline std::vector<ClassAuc> per_class_auc(const ScoredSet& set, std::size_t resamples = 0, double alpha = 0.05,
                                           std::uint64_t seed = 0) {
  std::vector<ClassAuc> out;
  for (std::size_t k = 0; k < set.classes.size(); ++k) {
    ClassAuc r;
    r.abnormality = set.classes[k];
    for (auto l : set.labels[k]) ++(l ? r.positives : r.negatives);
    if (r.positives && r.negatives) {
      r.auc = roc_auc(set.scores[k], set.labels[k]);
      if (resamples) r.ci = bootstrap_ci(set.scores[k], set.labels[k], resamples, alpha, derive_seed(seed, r.abnormality));
    }
    out.push_back(r);
  }
  return out;
}

// Mean over classes with a defined AUC; NaN when there are none.
inline double mean_auc(const std::vector<ClassAuc>& rows) {
  double s = 0;
  std::size_t n = 0;
  for (const auto& r : rows)
    if (!std::isnan(r.auc)) s += r.auc, ++n;
  return n ? s / double(n) : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace cxrmt
