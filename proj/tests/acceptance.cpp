// Acceptance run: one PASS/FAIL line per criterion. Exit status is 0 when
// every criterion passes or fails only for a documented known reason.
//
//   cxrmt_acceptance            run all criteria
//   cxrmt_acceptance 1 5 9      run a subset

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "cxrmt/agreement.hpp"
#include "cxrmt/band.hpp"
#include "cxrmt/cli.hpp"
#include "cxrmt/gradcheck.hpp"
#include "cxrmt/image_io.hpp"
#include "cxrmt/losses.hpp"
#include "cxrmt/metrics.hpp"
#include "cxrmt/model.hpp"
#include "cxrmt/normalize.hpp"
#include "cxrmt/synth.hpp"
#include "cxrmt/training.hpp"

using namespace cxrmt;
namespace fs = std::filesystem;

namespace {

// ---- pinned tolerances and budgets ----
constexpr double kGradTol = 1e-4;
constexpr double kGradStep = 1e-5;
constexpr double kGradTimeLimit = 60.0;
constexpr double kOverfitAbn = 0.05;
constexpr double kOverfitSeg = 0.01;
constexpr std::size_t kOverfitSteps = 500;
constexpr double kOverfitTimeLimit = 300.0;
constexpr double kMultiTaskMargin = 0.01;
constexpr double kMultiTaskTimeLimit = 1800.0;
constexpr double kOracleTol = 1e-12;
constexpr double kBandBudget = 20.0;
constexpr double kWidthTol = 1e-15;

struct Outcome {
  bool pass = false;
  std::string detail;
  bool known = false;  // failure documented as unattainable
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---- shared fixtures ----

ModelConfig desk_model() {
  ModelConfig c;
  c.input_size = 32;
  c.dense_block_sizes = {2, 2};
  c.growth_rate = 8;
  c.stem_channels = 16;
  return c;
}

struct DeskData {
  PreparedSet train, val, test;
};

// 700 images at 64 px, patient split 5/7, 1/7, 1/7 (about 500/100/100), models at 32 px.
DeskData desk_data(std::uint64_t seed) {
  const auto corpus = generate_corpus(default_synthetic_spec(64, 700, seed));
  const auto samples = corpus.samples();
  const auto plan = split_by_patient(samples, {5.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0}, seed);
  return {prepare_set(samples, plan.indices(Partition::train), 32), prepare_set(samples, plan.indices(Partition::val), 32),
          prepare_set(samples, plan.indices(Partition::test), 32)};
}

TrainConfig desk_training(std::uint64_t seed, unsigned losses) {
  TrainConfig t;
  t.batch_size = 16;
  t.max_epochs = 15;
  t.enabled_losses = losses;
  t.seed = derive_seed(seed, "train");
  return t;
}

// ---- 1: gradient correctness ----

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  auto cfg = desk_model();
  cfg.seed = 21;
  Model model(cfg);
  const auto corpus = generate_corpus(default_synthetic_spec(32, 12, 21));
  const auto samples = corpus.samples();
  std::vector<std::size_t> idx;
  bool has_a = false, has_b = false;
  for (std::size_t i = 0; i < samples.size() && idx.size() < 4; ++i) {
    const bool b = samples[i].dataset_id == "B";
    if ((b && !has_b) || (!b && !has_a) || idx.size() >= 2) idx.push_back(i), (b ? has_b : has_a) = true;
  }
  const auto set = prepare_set(samples, idx, 32);
  const auto x = image_batch(set, [&] {
    std::vector<std::size_t> all(set.size());
    std::iota(all.begin(), all.end(), 0);
    return all;
  }());
  const auto& labels = set.labels;
  const auto aw = compute_class_weights(labels, WeightPolicy::skip_degenerate);
  const auto lw = compute_spatial_weights(labels, WeightPolicy::skip_degenerate);

  struct Case {
    const char* name;
    unsigned terms;
    std::vector<std::string> skip;  // parameter prefixes the loss cannot reach
  };
  const std::vector<Case> cases{{"L_Abn", kAbn, {"decoder.", "loc_head."}},
                                {"L_Seg", kSeg, {"abn_head.", "loc_head."}},
                                {"L_Loc", kLoc, {"decoder.", "abn_head."}},
                                {"L_Glob", kAllLosses, {}}};
  std::string detail;
  double worst_all = 0;
  std::size_t checked = 0;
  for (const auto& c : cases) {
    double worst = 0;
    std::uint64_t s = 0;
    for (auto& p : model.params()) {
      bool skip = false;
      for (const auto& pre : c.skip) skip |= p.name.rfind(pre, 0) == 0;
      if (skip) continue;
      worst = std::max(worst, grad_check(
                                  [&](const Tensor&) {
                                    const auto o = model.forward(x, true);
                                    switch (c.terms) {
                                      case kAbn: return abnormality_loss(o.abn_probs, labels, aw);
                                      case kSeg: return segmentation_loss(o.seg_map, labels);
                                      case kLoc: return location_loss(o.loc_probs, labels, lw);
                                      default: return global_loss(o.abn_probs, o.loc_probs, o.seg_map, labels, aw, lw).total;
                                    }
                                  },
                                  p.value, {kGradStep, 3, ++s}));
      ++checked;
    }
    worst_all = std::max(worst_all, worst);
    detail += std::string(c.name) + " " + fmt("%.2e", worst) + ", ";
  }
  const double secs = seconds_since(t0);
  detail += std::to_string(checked) + " parameter tensors, " + fmt("%.1f s", secs);
  return {worst_all < kGradTol && secs < kGradTimeLimit, "max rel err " + detail};
}

// ---- 2: masking exactness ----

Outcome masking_exactness() {
  auto cfg = desk_model();
  cfg.input_size = 16;
  cfg.seed = 22;
  const auto corpus = generate_corpus(default_synthetic_spec(32, 64, 22));
  const auto samples = corpus.samples();
  std::vector<std::size_t> all(samples.size());
  std::iota(all.begin(), all.end(), 0);
  const auto set = prepare_set(samples, all, 16);
  const auto aw = compute_class_weights(set.labels, WeightPolicy::skip_degenerate);
  const auto lw = compute_spatial_weights(set.labels, WeightPolicy::skip_degenerate);

  std::vector<std::size_t> from_a, from_b;
  for (std::size_t i = 0; i < set.size(); ++i) (set.datasets[i] == "A" ? from_a : from_b).push_back(i);
  std::size_t masked_checked = 0, masked_nonzero = 0, own_nonzero = 0, loc_nonzero = 0, dec_nonzero = 0, batches = 0;
  for (std::size_t j = 0; j + 4 <= std::min(from_a.size(), from_b.size()); j += 4) {
    // four images from each dataset, interleaved
    std::vector<std::size_t> idx;
    for (std::size_t i = j; i < j + 4; ++i) idx.push_back(from_a[i]), idx.push_back(from_b[i]);
    auto labels = label_batch(set, idx);
    ++batches;
    Model model(cfg);
    const auto x = image_batch(set, idx);

    // mixed datasets: foreign-class logits
    auto o = model.forward(x, true);
    model.zero_grad();
    backward(global_loss(o.abn_probs, o.loc_probs, o.seg_map, labels, aw, lw).total);
    const auto g = o.abn_logits.grad();
    const std::size_t d = cfg.num_abnormality_classes;
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t k = 0; k < d; ++k) {
        const double v = g.empty() ? 1.0 : g[r * d + k];
        if (!labels[r].dataset_mask[k]) ++masked_checked, masked_nonzero += v != 0.0;
        else own_nonzero += v != 0.0;
      }

    // no spatial labels: location head untouched
    auto no_loc = labels;
    for (auto& l : no_loc) l.spatial_active = false;
    o = model.forward(x, true);
    model.zero_grad();
    backward(global_loss(o.abn_probs, o.loc_probs, o.seg_map, no_loc, aw, lw).total);
    for (const auto& p : model.params())
      if (p.name.rfind("loc_head.", 0) == 0)
        for (double v : p.value.grad()) loc_nonzero += v != 0.0;

    // no masks: decoder untouched
    auto no_seg = labels;
    for (auto& l : no_seg) l.seg_active = false;
    o = model.forward(x, true);
    model.zero_grad();
    backward(global_loss(o.abn_probs, o.loc_probs, o.seg_map, no_seg, aw, lw).total);
    for (const auto& p : model.params())
      if (p.name.rfind("decoder.", 0) == 0)
        for (double v : p.value.grad()) dec_nonzero += v != 0.0;
  }
  const bool pass = batches > 0 && masked_checked > 0 && masked_nonzero == 0 && own_nonzero > 0 && loc_nonzero == 0 &&
                    dec_nonzero == 0;
  return {pass, std::to_string(batches) + " mixed batches: nonzero foreign-class logit grads " + std::to_string(masked_nonzero) +
                    "/" + std::to_string(masked_checked) + ", nonzero location-head grads " + std::to_string(loc_nonzero) +
                    ", nonzero decoder grads " + std::to_string(dec_nonzero)};
}

// ---- 3: overfit sanity ----

Outcome overfit_sanity() {
  const auto t0 = Clock::now();
  auto cfg = desk_model();
  cfg.seed = 23;
  const auto corpus = generate_corpus(default_synthetic_spec(32, 8, 23));
  const auto samples = corpus.samples();
  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto set = prepare_set(samples, idx, 32);
  const auto x = image_batch(set, idx);
  const auto& labels = set.labels;
  const auto aw = compute_class_weights(labels, WeightPolicy::skip_degenerate);
  const auto lw = compute_spatial_weights(labels, WeightPolicy::skip_degenerate);
  Model model(cfg);
  AdamState opt;
  double abn = 0, seg = 0;
  std::size_t step = 0;
  for (; step <= kOverfitSteps; ++step) {
    const auto o = model.forward(x, true);
    const auto parts = global_loss(o.abn_probs, o.loc_probs, o.seg_map, labels, aw, lw, kAbn | kSeg);
    abn = parts.abn.item();
    seg = parts.seg.item();
    if ((abn < kOverfitAbn && seg < kOverfitSeg) || step == kOverfitSteps) break;
    model.zero_grad();
    backward(parts.total);
    adam_step(model.params(), opt, 3e-3);
  }
  const double secs = seconds_since(t0);
  return {abn < kOverfitAbn && seg < kOverfitSeg && secs < kOverfitTimeLimit,
          "after " + std::to_string(step) + " steps L_Abn " + fmt("%.4f", abn) + ", seg MSE " + fmt("%.4f", seg) + ", " +
              fmt("%.1f s", secs)};
}

// ---- 4: multi-task directional check ----

Outcome multi_task() {
  const auto t0 = Clock::now();
  const auto tax = default_taxonomy();
  double sum_abn = 0, sum_all = 0;
  std::string deltas;
  const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  for (auto seed : seeds) {
    const auto data = desk_data(seed);
    auto m = desk_model();
    m.seed = derive_seed(seed, "model");
    const double abn = run_experiment(data.train, data.val, data.test, tax, m, desk_training(seed, kAbn)).mean_test_auc;
    const double all = run_experiment(data.train, data.val, data.test, tax, m, desk_training(seed, kAllLosses)).mean_test_auc;
    sum_abn += abn;
    sum_all += all;
    deltas += (deltas.empty() ? "" : " ") + fmt("%+.3f", all - abn);
    std::cerr << "  [4] seed " << seed << ": Abn " << fmt("%.4f", abn) << ", Abn+Seg+Loc " << fmt("%.4f", all) << "\n";
  }
  const double n = double(seeds.size()), secs = seconds_since(t0);
  return {sum_all / n >= sum_abn / n - kMultiTaskMargin && secs < kMultiTaskTimeLimit,
          "mean test AUC Abn " + fmt("%.4f", sum_abn / n) + ", Abn+Seg+Loc " + fmt("%.4f", sum_all / n) +
              "; per-seed deltas " + deltas + "; " + fmt("%.0f s", secs)};
}

// ---- 5: metric oracles ----

double pair_count_auc(const std::vector<double>& s, const std::vector<std::uint8_t>& l) {
  double twice = 0, p = 0, n = 0;
  for (auto v : l) (v ? p : n) += 1;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (l[i] && !l[j]) twice += s[i] > s[j] ? 2 : s[i] == s[j] ? 1 : 0;
  return twice / (2 * p * n);
}

double direct_kappa(const ReaderMatrix& m, std::size_t a) {
  const double R = double(m.readers()), N = double(m.cases());
  double yes_total = 0, agree = 0;
  for (std::size_t c = 0; c < m.cases(); ++c) {
    double yes = 0;
    for (std::size_t r = 0; r < m.readers(); ++r) yes += m.at(c, a, r);
    agree += (yes * (yes - 1) + (R - yes) * (R - yes - 1)) / (R * (R - 1));
    yes_total += yes;
  }
  const double p_bar = agree / N, p = yes_total / (N * R), pe = p * p + (1 - p) * (1 - p);
  return (p_bar - pe) / (1 - pe);
}

Outcome metric_oracles() {
  Rng rng(55);
  std::size_t auc_mismatch = 0;
  for (int t = 0; t < 50; ++t) {
    std::vector<double> s;
    std::vector<std::uint8_t> l;
    const std::size_t n = 2 + rng.index(99);
    while (true) {
      s.clear();
      l.clear();
      for (std::size_t i = 0; i < n; ++i) {
        l.push_back(rng.bernoulli(0.4));
        double v = rng.normal() + (l.back() ? 0.5 : 0.0);
        if (t % 2 == 0) v = std::round(v * 4) / 4;  // force ties
        s.push_back(v);
      }
      const auto pos = std::count(l.begin(), l.end(), 1);
      if (pos > 0 && pos < std::ptrdiff_t(n)) break;
    }
    auc_mismatch += roc_auc(s, l) != pair_count_auc(s, l);
  }

  double worst = 0;
  std::size_t compared = 0;
  for (int t = 0; t < 20; ++t) {
    const std::size_t cases = 10 + rng.index(90);
    std::vector<std::string> ids;
    for (std::size_t c = 0; c < cases; ++c) ids.push_back("c" + std::to_string(c));
    ReaderMatrix m(ids, {"x", "y", "z"}, {"r0", "r1", "r2"}, t % 3);
    for (std::size_t a = 0; a < 3; ++a) {
      const double prev = rng.uniform(0.1, 0.6);
      for (std::size_t c = 0; c < cases; ++c) {
        const bool truth = rng.bernoulli(prev);
        for (std::size_t r = 0; r < 3; ++r) m.set(c, a, r, std::uint8_t(truth ^ rng.bernoulli(0.2)));
      }
    }
    for (std::size_t a = 0; a < 3; ++a) {
      int maj_pos = 0, maj_neg = 0, any_pos = 0, any_neg = 0, orig_pos = 0, rejected = 0;
      for (std::size_t c = 0; c < cases; ++c) {
        const int v0 = m.at(c, a, 0), v1 = m.at(c, a, 1), v2 = m.at(c, a, 2);
        const int yes = v0 + v1 + v2;
        maj_pos += yes >= 2;
        maj_neg += yes <= 1;
        any_pos += yes >= 1;
        any_neg += yes <= 2;
        const int o = m.at(c, a, m.original());
        orig_pos += o;
        rejected += o && yes == 1;
      }
      if (any_pos && any_neg) {
        const auto p = ppa_npa(m, a);
        worst = std::max({worst, std::abs(p.ppa - double(maj_pos) / any_pos), std::abs(p.npa - double(maj_neg) / any_neg)});
        compared += 2;
      }
      if (orig_pos) {
        worst = std::max(worst, std::abs(positive_disagreement(m, a) - double(rejected) / orig_pos));
        ++compared;
      }
      worst = std::max(worst, std::abs(fleiss_kappa(m, a) - direct_kappa(m, a)));
      ++compared;
    }
  }
  return {auc_mismatch == 0 && worst <= kOracleTol && compared > 0,
          "AUC mismatches " + std::to_string(auc_mismatch) + "/50; agreement max |diff| " + fmt("%.1e", worst) + " over " +
              std::to_string(compared) + " values"};
}

// ---- 6: band budget and scan oracles ----

std::vector<double> midpoints(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  std::vector<double> out;
  for (std::size_t i = 0; i + 1 < v.size(); ++i) out.push_back(0.5 * (v[i] + v[i + 1]));
  return out;
}

double scan_threshold(const std::vector<double>& s, const std::vector<std::uint8_t>& l) {
  double p = 0, n = 0;
  for (auto v : l) (v ? p : n) += 1;
  double best_t = 0, best = 1e300;
  for (double t : midpoints(s)) {
    double fp = 0, fn = 0;
    for (std::size_t i = 0; i < s.size(); ++i) fp += s[i] > t && !l[i], fn += s[i] <= t && l[i];
    const double gap = std::abs(fp * p - fn * n);  // |FPR - FNR| scaled by P N, exact in doubles
    if (gap < best) best = gap, best_t = t;
  }
  return best_t;
}

BandWidths scan_widths(const std::vector<double>& s, const std::vector<std::uint8_t>& l, double t, double ltp, double ltn) {
  auto pts = s;
  pts.push_back(t);
  auto edges = midpoints(pts);
  edges.push_back(0.0);
  edges.push_back(1.0);
  double tp = 0, tn = 0;
  for (std::size_t i = 0; i < s.size(); ++i) tp += l[i] && s[i] > t, tn += !l[i] && s[i] <= t;
  BandWidths w;
  for (double e : edges) {
    double inside = 0;
    if (e > t) {
      for (std::size_t i = 0; i < s.size(); ++i) inside += l[i] && s[i] > t && s[i] <= e;
      if (inside <= std::floor(ltp / 100 * tp + 1e-9)) w.rho_pos = std::max(w.rho_pos, e - t);
    } else if (e < t) {
      for (std::size_t i = 0; i < s.size(); ++i) inside += !l[i] && s[i] <= t && s[i] >= e;
      if (inside <= std::floor(ltn / 100 * tn + 1e-9)) w.rho_neg = std::max(w.rho_neg, t - e);
    }
  }
  return w;
}

Outcome band_budget() {
  std::size_t sets = 0, budget_viol = 0, t_mismatch = 0, w_mismatch = 0;
  double worst_tp = 0, worst_tn = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(derive_seed(66, seed));
    const double prev = rng.uniform(0.15, 0.6), sep = rng.uniform(0.5, 2.5);
    std::vector<double> s;
    std::vector<std::uint8_t> l;
    for (int i = 0; i < 200; ++i) {
      l.push_back(rng.bernoulli(prev));
      double v = 1 / (1 + std::exp(-(rng.normal() + (l.back() ? sep / 2 : -sep / 2))));
      if (seed % 3 == 0) v = std::round(v * 25) / 25;
      s.push_back(v);
    }
    ++sets;
    const auto p = calibrate_band(s, l, kBandBudget, kBandBudget);
    double tp = 0, tn = 0, tp_in = 0, tn_in = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const bool pred = s[i] > p.threshold;
      if (l[i] && pred) ++tp, tp_in += p.contains(s[i]);
      if (!l[i] && !pred) ++tn, tn_in += p.contains(s[i]);
    }
    if (tp > 0) worst_tp = std::max(worst_tp, tp_in / tp - 1.0 / tp);
    if (tn > 0) worst_tn = std::max(worst_tn, tn_in / tn - 1.0 / tn);
    budget_viol += (tp > 0 && tp_in / tp > kBandBudget / 100 + 1 / tp) || (tn > 0 && tn_in / tn > kBandBudget / 100 + 1 / tn);
    t_mismatch += p.threshold != scan_threshold(s, l);
    const auto o = scan_widths(s, l, p.threshold, kBandBudget, kBandBudget);
    w_mismatch += std::abs(o.rho_pos - p.rho_pos) > kWidthTol || std::abs(o.rho_neg - p.rho_neg) > kWidthTol;
  }
  return {budget_viol == 0 && t_mismatch == 0 && w_mismatch == 0,
          std::to_string(sets) + " sets of 200: budget violations " + std::to_string(budget_viol) +
              " (max inside fraction - 1/|class|: TP " + fmt("%.3f", worst_tp) + ", TN " + fmt("%.3f", worst_tn) +
              "), threshold mismatches " + std::to_string(t_mismatch) + ", width mismatches " + std::to_string(w_mismatch)};
}

// ---- 7: band effect on a reader-noise study ----

Outcome band_effect() {
  std::size_t improved = 0;
  std::array<std::size_t, 4> before{}, after{};
  std::string per_seed;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    BandStudySpec spec;
    spec.seed = seed;
    const auto study = simulate_band_study(spec);
    const auto params = calibrate_band(study.val.scores, study.val.labels, kBandBudget, kBandBudget);
    ScoredSet test;
    for (std::size_t i = 0; i < study.test.scores.size(); ++i)
      test.add(study.test.case_ids[i], "finding", study.test.scores[i], study.test.labels[i]);
    const auto row = band_report(test, {params}, &study.test.readers).at(0);
    improved += row.auc_reduced > row.auc_full;
    for (std::size_t c = 0; c < 4; ++c) before[c] += row.before[c], after[c] += row.after[c];
    per_seed += (per_seed.empty() ? "" : " ") + fmt("%.3f", row.auc_full) + "->" + fmt("%.3f", row.auc_reduced);
  }
  auto ret = [&](std::size_t c) { return before[c] ? 100.0 * double(after[c]) / double(before[c]) : std::nan(""); };
  const double low = std::max(ret(1), ret(2)), high = std::min(ret(0), ret(3));
  return {improved >= 4 && low < high,
          "AUC improved in " + std::to_string(improved) + "/5 (" + per_seed + "); retention % high_neg " + fmt("%.1f", ret(0)) +
              ", low_neg " + fmt("%.1f", ret(1)) + ", low_pos " + fmt("%.1f", ret(2)) + ", high_pos " + fmt("%.1f", ret(3))};
}

// ---- 8: normalization properties ----

std::vector<double> read_hexfloats(const std::string& path) {
  std::ifstream in(path);
  std::vector<double> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(std::strtod(line.c_str(), nullptr));
  return out;
}

Outcome normalization() {
  const NormalizationParams p;
  const auto corpus = generate_corpus(default_synthetic_spec(64, 100, 88));
  Rng rng(89);
  double worst_window = 0, worst_affine = 0, worst_idem = 0;
  for (const auto& s : corpus.images) {
    const Image& img = s.sample.image;
    const double a = rng.uniform(0.1, 10.0), b = rng.uniform(-500.0, 500.0);
    Image t = img;
    for (auto& v : t.pixels) v = a * v + b;
    const auto w = estimate_window(img, p), wt = estimate_window(t, p);
    const auto lohi = std::minmax_element(img.pixels.begin(), img.pixels.end());
    const double bin = a * (*lohi.second - *lohi.first) / double(p.bins);
    worst_window = std::max({worst_window, std::abs(wt.low - (a * w.low + b)) / bin, std::abs(wt.high - (a * w.high + b)) / bin});
    const auto once = normalize_image(img, p), shifted = normalize_image(t, p), twice = normalize_image(once, p);
    for (std::size_t i = 0; i < once.size(); ++i) {
      worst_affine = std::max(worst_affine, std::abs(shifted.pixels[i] - once.pixels[i]));
      worst_idem = std::max(worst_idem, std::abs(twice.pixels[i] - once.pixels[i]));
    }
  }
  const auto golden = read_image(std::string(CXRMT_TEST_DATA) + "/golden_radiograph.pgm");
  const auto expected = read_hexfloats(std::string(CXRMT_TEST_DATA) + "/golden_normalized.txt");
  const auto out = normalize_image(golden, p);
  std::size_t golden_diff = out.size() == expected.size() ? 0 : out.size() + expected.size();
  for (std::size_t i = 0; i < std::min(out.size(), expected.size()); ++i) golden_diff += out.pixels[i] != expected[i];

  const bool affine_ok = worst_window <= 1.0 && worst_affine <= 2.0 / double(p.bins);
  const bool idem_ok = worst_idem <= 2.0 * p.tail_mass;
  const bool golden_ok = golden_diff == 0;
  Outcome o;
  o.pass = affine_ok && idem_ok && golden_ok;
  o.known = affine_ok && golden_ok && !idem_ok;
  o.detail = "window shift " + fmt("%.3f", worst_window) + " bins (<= 1), affine max diff " + fmt("%.5f", worst_affine) +
             " (<= " + fmt("%.5f", 2.0 / double(p.bins)) + "), idempotence max diff " + fmt("%.4f", worst_idem) + " (<= " +
             fmt("%.4f", 2.0 * p.tail_mass) + "), golden mismatches " + std::to_string(golden_diff);
  if (o.known) o.detail += "; known: the specified spike filter removes the clipped end-bin mass on the second pass";
  return o;
}

// ---- 9: determinism of the CLI pipeline ----

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

bool run_pipeline(const fs::path& dir, std::string& error) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "cfg.json") << R"({"model": {"input_size": 32, "dense_block_sizes": [2, 2], "growth_rate": 8},
                                          "train": {"batch_size": 16, "max_epochs": 2}})";
  const auto d = dir.string();
  const std::vector<std::vector<std::string>> steps{
      {"synth", "--seed", "9", "--n", "32", "--count", "150", "--out", d + "/data"},
      {"train", "--manifest", d + "/data/manifest.csv", "--config", d + "/cfg.json", "--seed", "9", "--out", d + "/run/model.ckpt"},
      {"eval", "--ckpt", d + "/run/model.ckpt", "--manifest", d + "/data/manifest.csv", "--config", d + "/cfg.json", "--seed", "9",
       "--split", "val", "--out", d + "/run/metrics_val.csv"},
      {"eval", "--ckpt", d + "/run/model.ckpt", "--manifest", d + "/data/manifest.csv", "--config", d + "/cfg.json", "--seed", "9",
       "--split", "test", "--out", d + "/run/metrics_test.csv"},
      {"agree", "--annotations", d + "/data/annotations.csv", "--seed", "9", "--out", d + "/run/agreement.csv"},
      {"band", "--val-scores", d + "/run/scores_val.csv", "--test-scores", d + "/run/scores_test.csv", "--annotations",
       d + "/data/annotations.csv", "--seed", "9", "--out", d + "/run/band_report.csv"}};
  for (const auto& args : steps) {
    std::ostringstream out, err;
    if (cli_dispatch(args, out, err) != 0) {
      error = args[0] + ": " + err.str();
      return false;
    }
  }
  return true;
}

Outcome determinism() {
  const auto root = fs::temp_directory_path() / "cxrmt_acceptance";
  std::string error;
  if (!run_pipeline(root / "a", error) || !run_pipeline(root / "b", error)) return {false, "pipeline failed: " + error};
  const std::vector<std::string> files{"data/manifest.csv",    "data/annotations.csv", "run/model.history.csv",
                                       "run/metrics_val.csv",  "run/metrics_test.csv", "run/scores_val.csv",
                                       "run/scores_test.csv",  "run/agreement.csv",    "run/band_report.csv"};
  std::size_t identical = 0;
  std::string differ;
  for (const auto& f : files) {
    const auto a = slurp(root / "a" / f), b = slurp(root / "b" / f);
    if (!a.empty() && a == b) ++identical;
    else differ += " " + f;
  }
  return {identical == files.size(), std::to_string(identical) + "/" + std::to_string(files.size()) +
                                         " CSV outputs byte-identical across two runs" + (differ.empty() ? "" : "; differ:" + differ)};
}

// ---- 10: data-size sweep ----

Outcome data_size() {
  const auto t0 = Clock::now();
  const auto tax = default_taxonomy();
  const auto data = desk_data(10);
  const std::vector<double> fractions{0.1, 0.25, 0.5, 1.0};
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  const auto points = data_size_sweep(data.train, data.val, data.test, tax, desk_model(), desk_training(0, kAllLosses), fractions, seeds);
  // large fixed-region structure vs small high-variance blobs
  const std::vector<std::string> easy{"A:Cardiomegaly"}, hard{"A:Nodule", "B:Nodule"};
  auto mean_of = [&](double f, const std::vector<std::string>& names) {
    double s = 0;
    std::size_t n = 0;
    for (const auto& p : points)
      if (p.fraction == f)
        for (const auto& r : p.test_auc)
          if (std::find(names.begin(), names.end(), r.abnormality) != names.end() && !std::isnan(r.auc)) s += r.auc, ++n;
    return n ? s / double(n) : std::nan("");
  };
  bool monotone = true, dominates = true;
  std::string e, h;
  double prev = -1;
  for (double f : fractions) {
    const double ae = mean_of(f, easy), ah = mean_of(f, hard);
    monotone &= ae >= prev;
    dominates &= ae > ah;
    prev = ae;
    e += (e.empty() ? "" : " ") + fmt("%.3f", ae);
    h += (h.empty() ? "" : " ") + fmt("%.3f", ah);
  }
  return {monotone && dominates, "fractions 0.1/0.25/0.5/1.0, 3 seeds: easy (cardiomegaly) " + e + "; hard (nodules) " + h +
                                     "; " + fmt("%.0f s", seconds_since(t0))};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradient_correctness},
      {"masking exactness", masking_exactness},
      {"overfit sanity", overfit_sanity},
      {"multi-task directional check", multi_task},
      {"metric oracles", metric_oracles},
      {"band budget and scan oracles", band_budget},
      {"band effect on reader-noise study", band_effect},
      {"normalization properties", normalization},
      {"pipeline determinism", determinism},
      {"data-size sweep", data_size},
  };
  std::vector<std::size_t> chosen;
  for (int i = 1; i < argc; ++i) {
    const auto k = std::strtoul(argv[i], nullptr, 10);
    if (k < 1 || k > criteria.size()) {
      std::cerr << "usage: " << argv[0] << " [criterion 1-" << criteria.size() << "]...\n";
      return 2;
    }
    chosen.push_back(k);
  }
  if (chosen.empty())
    for (std::size_t k = 1; k <= criteria.size(); ++k) chosen.push_back(k);

  std::size_t passed = 0, known = 0, failed = 0;
  for (auto k : chosen) {
    const auto& [name, fn] = criteria[k - 1];
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << k << " " << name << ": " << o.detail << std::endl;
    if (o.pass) ++passed;
    else if (o.known) ++known;
    else ++failed;
  }
  std::cout << passed << " passed, " << known << " failed (documented), " << failed << " failed" << std::endl;
  return failed == 0 ? 0 : 1;
}
