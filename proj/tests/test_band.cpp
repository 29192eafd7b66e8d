#include <cmath>

#include <gtest/gtest.h>

#include "cxrmt/band.hpp"
#include "cxrmt/rng.hpp"

using namespace cxrmt;

namespace {

struct Set {
  std::vector<double> s;
  std::vector<std::uint8_t> l;
};

Set random_set(std::uint64_t seed, std::size_t n = 200, bool coarse = false) {
  Rng rng(seed);
  Set x;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t label = i % 3 == 0;
    double v = 1.0 / (1.0 + std::exp(-(rng.normal() + (label ? 1.2 : -0.4))));
    if (coarse) v = std::round(v * 20.0) / 20.0;
    x.s.push_back(v);
    x.l.push_back(label);
  }
  return x;
}

std::vector<double> candidate_cuts(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  std::vector<double> out;
  for (std::size_t i = 0; i + 1 < v.size(); ++i) out.push_back(0.5 * (v[i] + v[i + 1]));
  return out;
}

// Every candidate cut scored directly by rates; first minimum wins.
double scan_threshold(const Set& x) {
  double p = 0, n = 0;
  for (auto l : x.l) (l ? p : n) += 1;
  double best_t = 0, best = 1e300;
  for (double t : candidate_cuts(x.s)) {
    double fp = 0, fn = 0;
    for (std::size_t i = 0; i < x.s.size(); ++i) {
      if (x.s[i] > t && !x.l[i]) ++fp;
      if (x.s[i] <= t && x.l[i]) ++fn;
    }
    const double gap = std::abs(fp * p - fn * n);  // |FPR - FNR| scaled by P N
    if (gap < best) best = gap, best_t = t;
  }
  return best_t;
}

// Widths by trying every candidate edge: midpoints of all scores and t, plus the ends.
BandWidths scan_widths(const Set& x, double t, double ltp, double ltn) {
  std::vector<double> pts = x.s;
  pts.push_back(t);
  auto edges = candidate_cuts(pts);
  edges.push_back(0.0);
  edges.push_back(1.0);
  double tp = 0, tn = 0;
  for (std::size_t i = 0; i < x.s.size(); ++i) {
    tp += x.l[i] && x.s[i] > t;
    tn += !x.l[i] && x.s[i] <= t;
  }
  BandWidths w;
  for (double e : edges) {
    if (e > t) {
      double inside = 0;
      for (std::size_t i = 0; i < x.s.size(); ++i) inside += x.l[i] && x.s[i] > t && x.s[i] <= e;
      if (inside <= std::floor(ltp / 100.0 * tp + 1e-9)) w.rho_pos = std::max(w.rho_pos, e - t);
    } else if (e < t) {
      double inside = 0;
      for (std::size_t i = 0; i < x.s.size(); ++i) inside += !x.l[i] && x.s[i] <= t && x.s[i] >= e;
      if (inside <= std::floor(ltn / 100.0 * tn + 1e-9)) w.rho_neg = std::max(w.rho_neg, t - e);
    }
  }
  return w;
}

}  // namespace

TEST(Threshold, SeparatedScoresGiveGapMidpoint) {
  const std::vector<double> s{0.1, 0.2, 0.3, 0.7, 0.8};
  const std::vector<std::uint8_t> l{0, 0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(calibrate_threshold(s, l), 0.5);
}

TEST(Threshold, SymmetricScoresNearHalf) {
  std::vector<double> s;
  std::vector<std::uint8_t> l;
  for (int i = 0; i < 50; ++i) {
    const double d = 0.01 * (i + 1) * 0.8;
    s.push_back(0.5 + d), l.push_back(i % 5 != 0);
    s.push_back(0.5 - d), l.push_back(i % 5 == 0);
  }
  EXPECT_NEAR(calibrate_threshold(s, l), 0.5, 0.01);
}

TEST(Threshold, SingleClassThrows) {
  EXPECT_THROW(calibrate_threshold({0.1, 0.2}, {0, 0}), UndefinedMetricError);
}

TEST(Threshold, MatchesExhaustiveScan) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto x = random_set(seed, 200, seed % 2 == 1);
    EXPECT_EQ(calibrate_threshold(x.s, x.l), scan_threshold(x)) << seed;
  }
}

TEST(Widths, MatchBruteForceScan) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto x = random_set(seed, 200, seed % 2 == 1);
    const double t = calibrate_threshold(x.s, x.l);
    for (double budget : {0.0, 5.0, 20.0, 50.0, 100.0}) {
      const auto w = calibrate_widths(x.s, x.l, t, budget, budget);
      const auto o = scan_widths(x, t, budget, budget);
      EXPECT_NEAR(w.rho_pos, o.rho_pos, 1e-15) << seed << " " << budget;
      EXPECT_NEAR(w.rho_neg, o.rho_neg, 1e-15) << seed << " " << budget;
    }
  }
}

TEST(Widths, BudgetHoldsOnCalibrationData) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto x = random_set(seed);
    const auto p = calibrate_band(x.s, x.l, 20, 20);
    double tp = 0, tn = 0, tp_in = 0, tn_in = 0;
    for (std::size_t i = 0; i < x.s.size(); ++i) {
      const bool pred = x.s[i] > p.threshold;
      if (x.l[i] && pred) ++tp, tp_in += p.contains(x.s[i]);
      if (!x.l[i] && !pred) ++tn, tn_in += p.contains(x.s[i]);
    }
    EXPECT_LE(tp_in / tp, 0.20 + 1.0 / tp);
    EXPECT_LE(tn_in / tn, 0.20 + 1.0 / tn);
  }
}

TEST(Widths, ZeroBudgetExcludesCorrectCases) {
  const auto x = random_set(7);
  const auto p = calibrate_band(x.s, x.l, 0, 0);
  for (std::size_t i = 0; i < x.s.size(); ++i) {
    const bool correct = (x.s[i] > p.threshold) == bool(x.l[i]);
    if (correct) {
      EXPECT_FALSE(p.contains(x.s[i])) << i;
    }
  }
}

TEST(Widths, NoNearbyCasesReachToBudgetCase) {
  // TPs at 0.9 and 0.95 only: a 50% budget admits one, so the edge sits between them
  const std::vector<double> s{0.1, 0.2, 0.9, 0.95};
  const std::vector<std::uint8_t> l{0, 0, 1, 1};
  const auto w = calibrate_widths(s, l, 0.5, 50, 0);
  EXPECT_DOUBLE_EQ(0.5 + w.rho_pos, 0.925);
  EXPECT_DOUBLE_EQ(0.5 - w.rho_neg, 0.35);
}

TEST(Widths, ShrinkingBudgetNeverWidens) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto x = random_set(seed);
    const double t = calibrate_threshold(x.s, x.l);
    BandWidths prev{1e9, 1e9};
    for (double b : {100.0, 60.0, 30.0, 20.0, 10.0, 5.0, 0.0}) {
      const auto w = calibrate_widths(x.s, x.l, t, b, b);
      EXPECT_LE(w.rho_pos, prev.rho_pos);
      EXPECT_LE(w.rho_neg, prev.rho_neg);
      prev = w;
    }
  }
}

TEST(ApplyBand, EmptyBandRetainsAll) {
  BandParams p;
  p.threshold = 0.55;
  const auto split = apply_band({0.1, 0.5, 0.6, 0.9}, p);
  EXPECT_EQ(split.retained.size(), 4u);
  EXPECT_TRUE(split.removed.empty());
}

TEST(ApplyBand, PartitionMatchesIntervalOracle) {
  const auto x = random_set(11, 300);
  const auto p = calibrate_band(x.s, x.l);
  const auto split = apply_band(x.s, p);
  EXPECT_EQ(split.retained.size() + split.removed.size(), x.s.size());
  std::vector<int> seen(x.s.size(), 0);
  for (auto i : split.removed) {
    ++seen[i];
    EXPECT_TRUE(x.s[i] >= p.threshold - p.rho_neg && x.s[i] <= p.threshold + p.rho_pos);
  }
  for (auto i : split.retained) {
    ++seen[i];
    EXPECT_FALSE(x.s[i] >= p.threshold - p.rho_neg && x.s[i] <= p.threshold + p.rho_pos);
  }
  for (int v : seen) EXPECT_EQ(v, 1);
}

TEST(BandReport, NothingRemovedKeepsEverything) {
  const auto study = simulate_band_study({});
  ScoredSet test;
  for (std::size_t i = 0; i < study.test.scores.size(); ++i)
    test.add(study.test.case_ids[i], "finding", study.test.scores[i], study.test.labels[i]);
  BandParams p;
  p.threshold = 2.0;  // above every score, zero width
  const auto rows = band_report(test, {p}, &study.test.readers);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].retained, rows[0].total);
  EXPECT_EQ(rows[0].auc_full, rows[0].auc_reduced);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(rows[0].before[c], rows[0].after[c]);
    if (rows[0].before[c]) {
      EXPECT_EQ(rows[0].retention(c), 100.0);
    }
  }
}

TEST(BandReport, EverythingRemoved) {
  const auto study = simulate_band_study({});
  ScoredSet test;
  for (std::size_t i = 0; i < study.test.scores.size(); ++i)
    test.add(study.test.case_ids[i], "finding", study.test.scores[i], study.test.labels[i]);
  BandParams p;
  p.threshold = 0.5;
  p.rho_neg = p.rho_pos = 0.5;
  const auto rows = band_report(test, {p}, &study.test.readers);
  EXPECT_EQ(rows[0].retained, 0u);
  EXPECT_TRUE(std::isnan(rows[0].auc_reduced));
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(rows[0].after[c], 0u);
}

TEST(BandReport, CountsMatchGeneratorBookkeeping) {
  const auto study = simulate_band_study({});
  const auto p = calibrate_band(study.val.scores, study.val.labels);
  ScoredSet test;
  for (std::size_t i = 0; i < study.test.scores.size(); ++i)
    test.add(study.test.case_ids[i], "finding", study.test.scores[i], study.test.labels[i]);
  const auto rows = band_report(test, {p}, &study.test.readers);
  std::array<std::size_t, 4> before{}, after{};
  for (std::size_t i = 0; i < study.test.scores.size(); ++i) {
    const auto votes = study.test.readers.positives(i, 0);
    ++before[votes];
    const double s = study.test.scores[i];
    if (!(s >= p.threshold - p.rho_neg && s <= p.threshold + p.rho_pos)) ++after[votes];
  }
  EXPECT_EQ(rows[0].before, before);
  EXPECT_EQ(rows[0].after, after);
}

TEST(BandReport, RetainedCasesUnchanged) {
  const auto x = random_set(5);
  const auto p = calibrate_band(x.s, x.l);
  const auto split = apply_band(x.s, p);
  std::vector<double> rs;
  std::vector<std::uint8_t> rl;
  for (auto i : split.retained) rs.push_back(x.s[i]), rl.push_back(x.l[i]);
  ScoredSet set;
  for (std::size_t i = 0; i < x.s.size(); ++i) set.add("c" + std::to_string(i), "k", x.s[i], x.l[i]);
  const auto rows = band_report(set, {p});
  EXPECT_EQ(rows[0].auc_reduced, roc_auc(rs, rl));
}

TEST(BandStudy, LowConfidenceCasesNearTheCut) {
  const auto study = simulate_band_study({});
  double lo = 0, hi = 0, nlo = 0, nhi = 0;
  for (std::size_t i = 0; i < study.test.scores.size(); ++i) {
    const auto v = study.test.readers.positives(i, 0);
    const double d = std::abs(study.test.scores[i] - 0.5);
    if (v == 1 || v == 2) lo += d, ++nlo;
    else hi += d, ++nhi;
  }
  ASSERT_GT(nlo, 0);
  EXPECT_LT(lo / nlo, hi / nhi);
}
