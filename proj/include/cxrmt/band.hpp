#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "cxrmt/agreement.hpp"
#include "cxrmt/error.hpp"
#include "cxrmt/metrics.hpp"
#include "cxrmt/rng.hpp"

namespace cxrmt {

// Per-abnormality rejection band [t - rho_neg, t + rho_pos]. A case is called
// positive when its score exceeds t.
struct BandParams {
  double threshold = 0.5;
  double rho_neg = 0.0, rho_pos = 0.0;
  double l_tp = 20.0, l_tn = 20.0;  // percent

  double low() const { return std::max(0.0, threshold - rho_neg); }
  double high() const { return std::min(1.0, threshold + rho_pos); }
  bool contains(double s) const { return s >= low() && s <= high(); }
};

namespace band_detail {

inline void require_both_classes(const std::vector<double>& s, const std::vector<std::uint8_t>& l, const char* op) {
  if (s.size() != l.size()) throw ShapeError(std::string(op) + ": scores and labels differ in length");
  std::size_t pos = 0;
  for (auto v : l) pos += v;
  if (pos == 0 || pos == l.size()) throw UndefinedMetricError(std::string(op) + ": needs both classes");
}

inline std::vector<double> unique_sorted(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

// Largest count of correct cases a budget of `percent` allows.
inline std::size_t allowance(double percent, std::size_t n) {
  return std::size_t(std::floor(percent / 100.0 * double(n) + 1e-9));
}

}  // namespace band_detail

// Cut among midpoints of adjacent unique scores minimizing |FPR - FNR|; ties
// go to the smaller cut. The comparison uses |FP P - FN N|, which orders the
// cuts the same way and stays in integers.
inline double calibrate_threshold(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
  band_detail::require_both_classes(scores, labels, "calibrate_threshold");
  const auto u = band_detail::unique_sorted(scores);
  if (u.size() == 1) return u[0];  // every cut classifies all cases alike
  std::size_t pos = 0;
  for (auto l : labels) pos += l;
  const std::size_t neg = labels.size() - pos;
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // sweep: below the cut are predicted negative
  std::size_t fn = 0, tn = 0, i = 0;
  double best_t = 0.0;
  std::uint64_t best = std::numeric_limits<std::uint64_t>::max();
  for (std::size_t k = 0; k + 1 < u.size(); ++k) {
    while (i < order.size() && scores[order[i]] <= u[k]) (labels[order[i++]] ? fn : tn) += 1;
    const std::uint64_t fp = neg - tn;
    const std::uint64_t a = fp * pos, b = std::uint64_t(fn) * neg;
    const std::uint64_t gap = a > b ? a - b : b - a;
    if (gap < best) {
      best = gap;
      best_t = 0.5 * (u[k] + u[k + 1]);
    }
  }
  return best_t;
}

struct BandWidths {
  double rho_neg = 0.0, rho_pos = 0.0;
};

// Widest edges, taken at midpoints between adjacent scores (or the [0,1]
// ends), that keep at most l_tp% of true positives in (t, t + rho_pos] and at
// most l_tn% of true negatives in [t - rho_neg, t]. Each side is calibrated
// on its own budget.
inline BandWidths calibrate_widths(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels, double t,
                                   double l_tp, double l_tn) {
  if (scores.size() != labels.size()) throw ShapeError("calibrate_widths: scores and labels differ in length");
  if (l_tp < 0 || l_tp > 100 || l_tn < 0 || l_tn > 100) throw PreconditionError("calibrate_widths: budgets lie in [0,100]");
  std::vector<double> above{t}, below{t}, tp, tn;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] > t) {
      above.push_back(scores[i]);
      if (labels[i]) tp.push_back(scores[i]);
    } else {
      if (scores[i] < t) below.push_back(scores[i]);
      if (!labels[i]) tn.push_back(scores[i]);
    }
  }
  BandWidths w;
  // right side
  {
    std::sort(tp.begin(), tp.end());
    const auto k = band_detail::allowance(l_tp, tp.size());
    if (k >= tp.size()) {
      w.rho_pos = std::max(0.0, 1.0 - t);
    } else {
      const double block = tp[k];  // first TP that must stay outside
      const auto u = band_detail::unique_sorted(above);
      const auto it = std::lower_bound(u.begin(), u.end(), block);
      w.rho_pos = it == u.begin() ? 0.0 : 0.5 * (*(it - 1) + block) - t;
    }
  }
  // left side; TNs at exactly t sit inside any band
  {
    std::sort(tn.begin(), tn.end(), std::greater<>());
    const auto k = band_detail::allowance(l_tn, tn.size());
    if (k >= tn.size()) {
      w.rho_neg = std::max(0.0, t);
    } else {
      const double block = tn[k];
      if (block < t) {
        const auto u = band_detail::unique_sorted(below);
        w.rho_neg = t - 0.5 * (*std::upper_bound(u.begin(), u.end(), block) + block);
      }
    }
  }
  w.rho_neg = std::max(0.0, w.rho_neg);
  w.rho_pos = std::max(0.0, w.rho_pos);
  return w;
}

inline BandParams calibrate_band(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels,
                                 double l_tp = 20.0, double l_tn = 20.0) {
  BandParams p;
  p.threshold = calibrate_threshold(scores, labels);
  const auto w = calibrate_widths(scores, labels, p.threshold, l_tp, l_tn);
  p.rho_neg = w.rho_neg;
  p.rho_pos = w.rho_pos;
  p.l_tp = l_tp;
  p.l_tn = l_tn;
  return p;
}

struct BandSplit {
  std::vector<std::size_t> retained, removed;  // indices into the scored cases
};

inline BandSplit apply_band(const std::vector<double>& scores, const BandParams& p) {
  BandSplit out;
  for (std::size_t i = 0; i < scores.size(); ++i) (p.contains(scores[i]) ? out.removed : out.retained).push_back(i);
  return out;
}

struct BandReportRow {
  std::string abnormality;
  BandParams params;
  std::size_t total = 0, retained = 0;
  double auc_full = std::numeric_limits<double>::quiet_NaN();
  double auc_reduced = std::numeric_limits<double>::quiet_NaN();
  // indexed by ConfidenceCategory; cases missing from the reader matrix are not counted
  std::array<std::size_t, 4> before{}, after{};

  double retention(std::size_t category) const {
    return before[category] ? 100.0 * double(after[category]) / double(before[category])
                            : std::numeric_limits<double>::quiet_NaN();
  }
};

// params are aligned with test.classes. readers may be null when no reader study exists.
inline std::vector<BandReportRow> band_report(const ScoredSet& test, const std::vector<BandParams>& params,
                                              const ReaderMatrix* readers = nullptr) {
  if (params.size() != test.classes.size()) throw ShapeError("band_report: one BandParams per class required");
  std::map<std::string, std::size_t> case_index, abn_index;
  if (readers) {
    for (std::size_t c = 0; c < readers->cases(); ++c) case_index[readers->case_ids()[c]] = c;
    for (std::size_t a = 0; a < readers->abnormalities(); ++a) abn_index[readers->abnormality_names()[a]] = a;
  }
  std::vector<BandReportRow> rows;
  for (std::size_t k = 0; k < test.classes.size(); ++k) {
    const auto& s = test.scores[k];
    const auto& l = test.labels[k];
    BandReportRow r;
    r.abnormality = test.classes[k];
    r.params = params[k];
    r.total = s.size();
    const auto split = apply_band(s, params[k]);
    r.retained = split.retained.size();
    try {
      r.auc_full = roc_auc(s, l);
    } catch (const UndefinedMetricError&) {
    }
    std::vector<double> rs;
    std::vector<std::uint8_t> rl;
    for (auto i : split.retained) rs.push_back(s[i]), rl.push_back(l[i]);
    try {
      r.auc_reduced = roc_auc(rs, rl);
    } catch (const UndefinedMetricError&) {
    }
    if (readers && abn_index.count(r.abnormality)) {
      const auto a = abn_index[r.abnormality];
      std::vector<char> kept(s.size(), 0);
      for (auto i : split.retained) kept[i] = 1;
      for (std::size_t i = 0; i < s.size(); ++i) {
        auto it = case_index.find(test.case_ids[k][i]);
        if (it == case_index.end()) continue;
        const auto cat = readers->positives(it->second, a);
        if (cat > 3) continue;
        ++r.before[cat];
        if (kept[i]) ++r.after[cat];
      }
    }
    rows.push_back(r);
  }
  return rows;
}

// Latent-variable reader study for exercising the band. Each case has a
// latent severity z ~ N(0,1) and is truly positive when z > cut. Every reader
// sees z + N(0, reader_sigma), so disagreement concentrates near the cut, and
// the model scores sigmoid(gain (z - cut) + N(0, model_sigma)).
struct BandStudySpec {
  std::size_t val_cases = 400, test_cases = 400;
  double cut = 0.8;  // about 21% prevalence
  double reader_sigma = 0.35;
  double model_sigma = 0.5;
  double gain = 2.0;
  std::uint64_t seed = 1;
};

struct BandStudySet {
  std::vector<std::string> case_ids;
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;  // the original reader's labels
  ReaderMatrix readers;
};

struct BandStudy {
  BandStudySet val, test;
};

inline BandStudySet simulate_band_cases(const BandStudySpec& spec, std::size_t n, const std::string& prefix, std::uint64_t seed) {
  BandStudySet out;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) out.case_ids.push_back(prefix + std::to_string(i));
  out.readers = ReaderMatrix(out.case_ids, {"finding"}, {"original", "reader1", "reader2"}, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const double z = rng.normal();
    for (std::size_t r = 0; r < 3; ++r) out.readers.set(i, 0, r, z + spec.reader_sigma * rng.normal() > spec.cut ? 1 : 0);
    out.labels.push_back(out.readers.at(i, 0, 0));
    out.scores.push_back(1.0 / (1.0 + std::exp(-(spec.gain * (z - spec.cut) + spec.model_sigma * rng.normal()))));
  }
  return out;
}

inline BandStudy simulate_band_study(const BandStudySpec& spec) {
  return {simulate_band_cases(spec, spec.val_cases, "val", derive_seed(spec.seed, "val")),
          simulate_band_cases(spec, spec.test_cases, "test", derive_seed(spec.seed, "test"))};
}

}  // namespace cxrmt
