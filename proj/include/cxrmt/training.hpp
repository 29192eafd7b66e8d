#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "cxrmt/data.hpp"
#include "cxrmt/error.hpp"
#include "cxrmt/image.hpp"
#include "cxrmt/losses.hpp"
#include "cxrmt/manifest.hpp"
#include "cxrmt/metrics.hpp"
#include "cxrmt/model.hpp"
#include "cxrmt/normalize.hpp"
#include "cxrmt/rng.hpp"

namespace cxrmt {

// Model-ready data: windowed images resized to N, labels with masks resized to N.
struct PreparedSet {
  std::size_t size_n = 0;
  std::vector<std::string> ids, patients, datasets;
  std::vector<std::vector<double>> images;  // N*N each, values in [0,1]
  std::vector<LabelRecord> labels;

  std::size_t size() const { return images.size(); }
};

inline std::vector<std::uint8_t> resize_mask_nearest(const std::vector<std::uint8_t>& seg, std::size_t from, std::size_t to) {
  if (from == to) return seg;
  std::vector<std::uint8_t> out(2 * to * to);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t y = 0; y < to; ++y)
      for (std::size_t x = 0; x < to; ++x) {
        const std::size_t sy = std::min(from - 1, (2 * y + 1) * from / (2 * to));
        const std::size_t sx = std::min(from - 1, (2 * x + 1) * from / (2 * to));
        out[(c * to + y) * to + x] = seg[(c * from + sy) * from + sx];
      }
  return out;
}

// Square images only; masks follow the image size.
inline void prepare_into(PreparedSet& out, const LabeledSample& s, const NormalizationParams& norm = {}) {
  const std::size_t n = out.size_n;
  if (s.image.width != s.image.height) throw ShapeError("prepare_sample: " + s.image_id + " is not square");
  Image img = normalize_image(s.image, norm);
  if (img.width != n) img = resize_bilinear(img, n, n);
  LabelRecord l = s.labels;
  if (l.seg_active) {
    if (l.seg.size() != 2 * s.image.width * s.image.height)
      throw ShapeError("prepare_sample: mask of " + s.image_id + " does not match its image");
    l.seg = resize_mask_nearest(l.seg, s.image.width, n);
  } else {
    l.seg.assign(2 * n * n, 0);
  }
  out.ids.push_back(s.image_id);
  out.patients.push_back(s.patient_id);
  out.datasets.push_back(s.dataset_id);
  out.images.push_back(std::move(img.pixels));
  out.labels.push_back(std::move(l));
}

inline PreparedSet prepare_set(const std::vector<LabeledSample>& samples, const std::vector<std::size_t>& indices,
                               std::size_t n, const NormalizationParams& norm = {}) {
  PreparedSet out;
  out.size_n = n;
  for (auto i : indices) prepare_into(out, samples.at(i), norm);
  return out;
}

enum class Partition : std::uint8_t { train = 0, val = 1, test = 2 };

inline const char* partition_name(Partition p) {
  switch (p) {
    case Partition::train: return "train";
    case Partition::val: return "val";
    case Partition::test: return "test";
  }
  return "?";
}

struct SplitFractions {
  double train = 0.70, val = 0.10, test = 0.20;
};

struct SplitPlan {
  std::map<std::string, Partition> patient;
  std::vector<Partition> sample;  // aligned with the manifest

  std::vector<std::size_t> indices(Partition p) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < sample.size(); ++i)
      if (sample[i] == p) out.push_back(i);
    return out;
  }
};

// Patients are ordered by id and then shuffled, so the plan depends only on
// the set of patients and the seed, not on manifest order.
inline SplitPlan split_by_patient(const std::vector<LabeledSample>& samples, SplitFractions f = {}, std::uint64_t seed = 0) {
  if (f.train < 0 || f.val < 0 || f.test < 0 || std::abs(f.train + f.val + f.test - 1.0) > 1e-9)
    throw ConfigError("split_by_patient: fractions must be non-negative and sum to 1");
  std::set<std::string> unique;
  for (const auto& s : samples) {
    if (s.patient_id.empty()) throw ConfigError("split_by_patient: sample " + s.image_id + " has no patient id");
    unique.insert(s.patient_id);
  }
  const std::size_t parts = (f.train > 0) + (f.val > 0) + (f.test > 0);
  if (unique.size() < parts)
    throw ConfigError("split_by_patient: " + std::to_string(unique.size()) + " patients cannot fill " +
                      std::to_string(parts) + " partitions");
  std::vector<std::string> patients(unique.begin(), unique.end());
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(patients.begin(), patients.end());
  const std::size_t p = patients.size();
  auto n_val = std::size_t(std::llround(f.val * double(p)));
  auto n_test = std::size_t(std::llround(f.test * double(p)));
  // every non-empty fraction gets at least one patient
  if (f.val > 0) n_val = std::max<std::size_t>(n_val, 1);
  if (f.test > 0) n_test = std::max<std::size_t>(n_test, 1);
  if (f.train > 0) {
    while (n_val + n_test >= p) (n_test >= n_val && n_test > 1 ? n_test : n_val) -= 1;
  }
  SplitPlan plan;
  for (std::size_t i = 0; i < p; ++i)
    plan.patient[patients[i]] = i < n_val ? Partition::val : i < n_val + n_test ? Partition::test : Partition::train;
  for (const auto& s : samples) plan.sample.push_back(plan.patient.at(s.patient_id));
  return plan;
}

struct AdamConfig {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t step = 0;
};

// One bias-corrected Adam update. All gradients are checked before any
// parameter moves, so a non-finite gradient leaves params and state intact.
inline void adam_step(std::vector<NamedParam>& params, AdamState& state, double lr, const AdamConfig& cfg = {}) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.value.numel(), 0.0);
      state.v.emplace_back(p.value.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state does not match the parameters");
  for (const auto& p : params) {
    if (!p.value.has_grad()) continue;
    for (double g : p.value.grad())
      if (!std::isfinite(g)) throw NumericsError("adam_step: non-finite gradient in " + p.name);
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k].value;
    if (!p.has_grad()) continue;
    if (state.m[k].size() != p.numel()) throw ShapeError("adam_step: state size mismatch for " + params[k].name);
    auto w = p.mutable_data();
    const auto g = p.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
    }
  }
}

// Divides the learning rate by `factor` once the monitored loss has failed to
// improve on its best by at least min_delta for `patience` consecutive epochs.
struct PlateauScheduler {
  double lr = 1e-3;
  double factor = 10.0;
  std::size_t patience = 3;
  double min_delta = 1e-4;
  double best = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;

  PlateauScheduler() = default;
  PlateauScheduler(double lr0, double f, std::size_t pat, double delta) : lr(lr0), factor(f), patience(pat), min_delta(delta) {
    if (!(f > 1.0)) throw ConfigError("plateau factor must exceed 1");
  }

  // Returns true when the learning rate was reduced.
  bool observe(double loss) {
    if (loss < best - min_delta) {
      best = loss;
      bad_epochs = 0;
      return false;
    }
    if (++bad_epochs < patience) return false;
    lr /= factor;
    bad_epochs = 0;
    return true;
  }
};

struct TrainConfig {
  std::size_t batch_size = 8;
  AdamConfig adam;
  double initial_lr = 1e-3;
  double plateau_factor = 10.0;
  std::size_t plateau_patience = 3;
  double plateau_min_delta = 1e-4;
  double min_lr = 1e-6;
  std::size_t max_epochs = 10;
  std::size_t max_steps = 0;  // 0: no step limit
  std::uint64_t seed = 1;
  unsigned enabled_losses = kAllLosses;
  LossWeights loss_weights;
  WeightPolicy weight_policy = WeightPolicy::skip_degenerate;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"batch_size", c.batch_size},
       {"adam_beta1", c.adam.beta1},
       {"adam_beta2", c.adam.beta2},
       {"adam_eps", c.adam.eps},
       {"initial_lr", c.initial_lr},
       {"plateau_factor", c.plateau_factor},
       {"plateau_patience", c.plateau_patience},
       {"plateau_min_delta", c.plateau_min_delta},
       {"min_lr", c.min_lr},
       {"max_epochs", c.max_epochs},
       {"max_steps", c.max_steps},
       {"seed", c.seed},
       {"enabled_losses", c.enabled_losses},
       {"loss_weights", {c.loss_weights.abn, c.loss_weights.seg, c.loss_weights.loc}},
       {"weight_policy", c.weight_policy == WeightPolicy::strict ? "strict" : "skip_degenerate"}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  auto opt = [&](const char* k, auto& v) {
    if (j.contains(k)) j.at(k).get_to(v);
  };
  opt("batch_size", c.batch_size);
  opt("adam_beta1", c.adam.beta1);
  opt("adam_beta2", c.adam.beta2);
  opt("adam_eps", c.adam.eps);
  opt("initial_lr", c.initial_lr);
  opt("plateau_factor", c.plateau_factor);
  opt("plateau_patience", c.plateau_patience);
  opt("plateau_min_delta", c.plateau_min_delta);
  opt("min_lr", c.min_lr);
  opt("max_epochs", c.max_epochs);
  opt("max_steps", c.max_steps);
  opt("seed", c.seed);
  opt("enabled_losses", c.enabled_losses);
  if (j.contains("loss_weights")) {
    const auto w = j.at("loss_weights").get<std::vector<double>>();
    if (w.size() != 3) throw ConfigError("loss_weights needs three entries (abn, seg, loc)");
    c.loss_weights = {w[0], w[1], w[2]};
  }
  if (j.contains("weight_policy")) {
    const auto p = j.at("weight_policy").get<std::string>();
    if (p == "strict") c.weight_policy = WeightPolicy::strict;
    else if (p == "skip_degenerate") c.weight_policy = WeightPolicy::skip_degenerate;
    else throw ConfigError("weight_policy must be strict or skip_degenerate");
  }
}

// Parses "abn,seg,loc" style lists.
inline unsigned parse_losses(const std::string& text) {
  unsigned out = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = std::min(text.find(',', start), text.size());
    const auto item = text.substr(start, end - start);
    if (item == "abn") out |= kAbn;
    else if (item == "seg") out |= kSeg;
    else if (item == "loc") out |= kLoc;
    else if (!item.empty()) throw ConfigError("unknown loss term '" + item + "' (expected abn, seg, loc)");
    start = end + 1;
  }
  return out;
}

struct EpochRecord {
  std::size_t epoch = 0, steps = 0;
  double train_loss = 0, val_loss = 0, lr = 0;
  std::vector<double> val_auc;  // per abnormality class, NaN where undefined
  bool lr_reduced = false;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t steps = 0;
  ClassWeights abn_weights, loc_weights;
};

inline Tensor image_batch(const PreparedSet& set, const std::vector<std::size_t>& idx) {
  std::vector<const std::vector<double>*> ptrs;
  for (auto i : idx) ptrs.push_back(&set.images[i]);
  return make_image_batch(ptrs, set.size_n);
}

inline std::vector<LabelRecord> label_batch(const PreparedSet& set, const std::vector<std::size_t>& idx) {
  std::vector<LabelRecord> out;
  for (auto i : idx) out.push_back(set.labels[i]);
  return out;
}

inline std::vector<std::vector<std::size_t>> batches_of(std::size_t n, std::size_t batch) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch) {
    out.emplace_back();
    for (std::size_t j = i; j < std::min(n, i + batch); ++j) out.back().push_back(j);
  }
  return out;
}

// Abnormality probabilities [n][D] with running batch-norm statistics.
inline std::vector<std::vector<double>> predict_probabilities(Model& model, const PreparedSet& set, std::size_t batch = 16) {
  std::vector<std::vector<double>> out;
  const std::size_t d = model.config().num_abnormality_classes;
  for (const auto& b : batches_of(set.size(), batch)) {
    const auto o = model.predict(image_batch(set, b));
    for (std::size_t r = 0; r < b.size(); ++r)
      out.emplace_back(o.abn_probs.data().begin() + r * d, o.abn_probs.data().begin() + (r + 1) * d);
  }
  return out;
}

// Own-dataset classes only: foreign classes carry no label.
inline ScoredSet scored_set(const PreparedSet& set, const std::vector<std::vector<double>>& probs, const Taxonomy& tax) {
  ScoredSet out;
  const auto names = tax.qualified_names();
  for (const auto& n : names) {
    out.classes.push_back(n);
    out.scores.emplace_back();
    out.labels.emplace_back();
    out.case_ids.emplace_back();
  }
  for (std::size_t i = 0; i < set.size(); ++i)
    for (std::size_t k = 0; k < names.size(); ++k)
      if (set.labels[i].dataset_mask[k]) {
        out.scores[k].push_back(probs[i][k]);
        out.labels[k].push_back(set.labels[i].abnormal[k]);
        out.case_ids[k].push_back(set.ids[i]);
      }
  return out;
}

inline std::vector<ScoreRow> score_rows(const ScoredSet& s) {
  std::vector<ScoreRow> rows;
  for (std::size_t k = 0; k < s.classes.size(); ++k)
    for (std::size_t i = 0; i < s.scores[k].size(); ++i)
      rows.push_back({s.case_ids[k][i], s.classes[k], s.scores[k][i], s.labels[k][i]});
  return rows;
}

inline ScoredSet scored_set(const std::vector<ScoreRow>& rows) {
  ScoredSet out;
  for (const auto& r : rows) out.add(r.case_id, r.abnormality, r.score, r.label);
  return out;
}

// Mean loss over the set in inference mode, using the training-set weights.
inline double evaluate_loss(Model& model, const PreparedSet& set, const ClassWeights& aw, const ClassWeights& lw,
                            unsigned enabled, const LossWeights& weights, std::size_t batch) {
  NoGradGuard guard;
  double total = 0;
  for (const auto& b : batches_of(set.size(), batch)) {
    const auto o = model.forward(image_batch(set, b), false);
    const auto labels = label_batch(set, b);
    total += global_loss(o.abn_probs, o.loc_probs, o.seg_map, labels, aw, lw, enabled, weights).total.item() * double(b.size());
  }
  return total / double(set.size());
}

inline TrainResult train(Model& model, const PreparedSet& train_set, const PreparedSet& val_set, const TrainConfig& cfg) {
  if (train_set.size() == 0) throw ConfigError("train: empty training partition");
  if (val_set.size() == 0) throw ConfigError("train: empty validation partition");
  if (cfg.batch_size == 0) throw ConfigError("train: batch size must be positive");
  if (train_set.size_n != model.config().input_size || val_set.size_n != model.config().input_size)
    throw ConfigError("train: prepared image size does not match the model input");
  TrainResult result;
  result.abn_weights = compute_class_weights(train_set.labels, cfg.weight_policy);
  result.loc_weights = compute_spatial_weights(train_set.labels, WeightPolicy::skip_degenerate);
  const auto& aw = result.abn_weights;
  const auto& lw = result.loc_weights;
  PlateauScheduler sched(cfg.initial_lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_min_delta);
  AdamState opt;
  const auto d = model.config().num_abnormality_classes;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(derive_seed(cfg.seed, "epoch"), std::uint64_t(epoch)));
    rng.shuffle(order.begin(), order.end());
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = sched.lr;
    double loss_sum = 0;
    std::size_t seen = 0;
    bool step_limit = false;
    for (std::size_t i = 0; i < order.size(); i += cfg.batch_size) {
      std::vector<std::size_t> idx(order.begin() + i, order.begin() + std::min(order.size(), i + cfg.batch_size));
      const auto out = model.forward(image_batch(train_set, idx), true);
      const auto labels = label_batch(train_set, idx);
      const auto loss =
          global_loss(out.abn_probs, out.loc_probs, out.seg_map, labels, aw, lw, cfg.enabled_losses, cfg.loss_weights).total;
      model.zero_grad();
      backward(loss);
      adam_step(model.params(), opt, sched.lr, cfg.adam);
      loss_sum += loss.item() * double(idx.size());
      seen += idx.size();
      ++result.steps;
      if (cfg.max_steps && result.steps >= cfg.max_steps) {
        step_limit = true;
        break;
      }
    }
    rec.steps = result.steps;
    rec.train_loss = loss_sum / double(seen);
    rec.val_loss = evaluate_loss(model, val_set, aw, lw, cfg.enabled_losses, cfg.loss_weights, cfg.batch_size);
    rec.val_auc.assign(d, std::numeric_limits<double>::quiet_NaN());
    const auto probs = predict_probabilities(model, val_set, cfg.batch_size);
    for (std::size_t k = 0; k < d; ++k) {
      std::vector<double> s;
      std::vector<std::uint8_t> l;
      for (std::size_t i = 0; i < val_set.size(); ++i)
        if (val_set.labels[i].dataset_mask[k]) s.push_back(probs[i][k]), l.push_back(val_set.labels[i].abnormal[k]);
      try {
        rec.val_auc[k] = roc_auc(s, l);
      } catch (const UndefinedMetricError&) {
      }
    }
    rec.lr_reduced = sched.observe(rec.val_loss);
    result.history.push_back(rec);
    if (step_limit || sched.lr < cfg.min_lr) break;
  }
  return result;
}

inline void write_history(const std::filesystem::path& path, const TrainResult& r, const std::vector<std::string>& class_names) {
  std::vector<std::string> header{"epoch", "steps", "train_loss", "val_loss", "lr", "lr_reduced"};
  for (const auto& n : class_names) header.push_back("val_auc:" + n);
  std::vector<std::vector<std::string>> rows;
  for (const auto& e : r.history) {
    std::vector<std::string> row{std::to_string(e.epoch), std::to_string(e.steps), csv::format(e.train_loss),
                                 csv::format(e.val_loss), csv::format(e.lr), e.lr_reduced ? "1" : "0"};
    for (double a : e.val_auc) row.push_back(std::isnan(a) ? "" : csv::format(a));
    rows.push_back(std::move(row));
  }
  csv::write(path, header, rows);
}

// Train on one partition plan and score the test partition.
struct ExperimentResult {
  TrainResult training;
  std::vector<ClassAuc> test_auc;
  double mean_test_auc = std::numeric_limits<double>::quiet_NaN();
};

inline ExperimentResult run_experiment(const PreparedSet& train_set, const PreparedSet& val_set, const PreparedSet& test_set,
                                       const Taxonomy& tax, ModelConfig mcfg, const TrainConfig& tcfg) {
  Model model(mcfg);
  ExperimentResult r;
  r.training = train(model, train_set, val_set, tcfg);
  r.test_auc = per_class_auc(scored_set(test_set, predict_probabilities(model, test_set, tcfg.batch_size), tax));
  r.mean_test_auc = mean_auc(r.test_auc);
  return r;
}

// Training-set subsample by patient: the first ceil(fraction * P) patients of
// a seeded shuffle, so smaller fractions are nested in larger ones.
inline std::vector<std::size_t> subsample_patients(const PreparedSet& set, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("subsample: fraction must lie in (0,1]");
  std::set<std::string> unique(set.patients.begin(), set.patients.end());
  std::vector<std::string> patients(unique.begin(), unique.end());
  Rng rng(derive_seed(seed, "subsample"));
  rng.shuffle(patients.begin(), patients.end());
  const auto keep = std::max<std::size_t>(1, std::size_t(std::ceil(fraction * double(patients.size()) - 1e-9)));
  std::set<std::string> chosen(patients.begin(), patients.begin() + std::min(keep, patients.size()));
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < set.size(); ++i)
    if (chosen.count(set.patients[i])) out.push_back(i);
  return out;
}

inline PreparedSet subset(const PreparedSet& set, const std::vector<std::size_t>& idx) {
  PreparedSet out;
  out.size_n = set.size_n;
  for (auto i : idx) {
    out.ids.push_back(set.ids[i]);
    out.patients.push_back(set.patients[i]);
    out.datasets.push_back(set.datasets[i]);
    out.images.push_back(set.images[i]);
    out.labels.push_back(set.labels[i]);
  }
  return out;
}

struct SweepPoint {
  double fraction = 0;
  std::uint64_t seed = 0;
  std::size_t train_images = 0;
  std::vector<ClassAuc> test_auc;
};

inline std::vector<SweepPoint> data_size_sweep(const PreparedSet& train_set, const PreparedSet& val_set,
                                               const PreparedSet& test_set, const Taxonomy& tax, const ModelConfig& mcfg,
                                               const TrainConfig& tcfg, const std::vector<double>& fractions,
                                               const std::vector<std::uint64_t>& seeds) {
  std::vector<SweepPoint> out;
  for (auto seed : seeds)
    for (double f : fractions) {
      auto m = mcfg;
      auto t = tcfg;
      m.seed = derive_seed(seed, "model");
      t.seed = derive_seed(seed, "train");
      const auto part = subset(train_set, subsample_patients(train_set, f, seed));
      SweepPoint p;
      p.fraction = f;
      p.seed = seed;
      p.train_images = part.size();
      p.test_auc = run_experiment(part, val_set, test_set, tax, m, t).test_auc;
      out.push_back(std::move(p));
    }
  return out;
}

}  // namespace cxrmt
