#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cxrmt/data.hpp"
#include "cxrmt/error.hpp"
#include "cxrmt/ops.hpp"

namespace cxrmt {

inline constexpr double kProbEpsilon = 1e-7;

// w_pos = (P+N)/P, w_neg = (P+N)/N per class. A class whose weights are both
// zero is excluded from the loss (see WeightPolicy::skip_degenerate).
struct ClassWeights {
  std::vector<double> w_pos, w_neg;
  std::vector<std::size_t> positives, negatives;

  std::size_t size() const { return w_pos.size(); }
  bool active(std::size_t n) const { return w_pos[n] != 0.0 || w_neg[n] != 0.0; }
};

enum class WeightPolicy {
  strict,           // a class without positives or negatives is an error
  skip_degenerate,  // such a class gets zero weight and never contributes
};

namespace detail {

inline ClassWeights weights_from_counts(std::vector<std::size_t> pos, std::vector<std::size_t> neg, WeightPolicy policy,
                                        const char* what) {
  ClassWeights w;
  w.w_pos.resize(pos.size());
  w.w_neg.resize(pos.size());
  for (std::size_t n = 0; n < pos.size(); ++n) {
    if (pos[n] == 0 || neg[n] == 0) {
      if (policy == WeightPolicy::strict)
        throw DegenerateClassError(std::string(what) + " class " + std::to_string(n) + " has " +
                                   std::to_string(pos[n]) + " positives and " + std::to_string(neg[n]) + " negatives");
      w.w_pos[n] = w.w_neg[n] = 0.0;
      continue;
    }
    const double total = double(pos[n] + neg[n]);
    w.w_pos[n] = total / double(pos[n]);
    w.w_neg[n] = total / double(neg[n]);
  }
  w.positives = std::move(pos);
  w.negatives = std::move(neg);
  return w;
}

}  // namespace detail

// Counts only samples whose dataset_mask covers the class.
inline ClassWeights compute_class_weights(const std::vector<LabelRecord>& labels, WeightPolicy policy = WeightPolicy::strict) {
  if (labels.empty()) throw PreconditionError("compute_class_weights: no samples");
  const std::size_t d = labels[0].abnormal.size();
  std::vector<std::size_t> pos(d, 0), neg(d, 0);
  for (const auto& l : labels) {
    if (l.abnormal.size() != d || l.dataset_mask.size() != d) throw ShapeError("compute_class_weights: ragged labels");
    for (std::size_t n = 0; n < d; ++n)
      if (l.dataset_mask[n]) ++(l.abnormal[n] ? pos[n] : neg[n]);
  }
  return detail::weights_from_counts(std::move(pos), std::move(neg), policy, "abnormality");
}

// Spatial classes, counted over samples with spatial_active.
inline ClassWeights compute_spatial_weights(const std::vector<LabelRecord>& labels, WeightPolicy policy = WeightPolicy::strict) {
  std::vector<std::size_t> pos(kSpatialClasses, 0), neg(kSpatialClasses, 0);
  for (const auto& l : labels)
    if (l.spatial_active)
      for (std::size_t m = 0; m < kSpatialClasses; ++m) ++(l.spatial[m] ? pos[m] : neg[m]);
  return detail::weights_from_counts(std::move(pos), std::move(neg), policy, "spatial");
}

namespace detail {

// -sum_b sum_n (a_bn log p_bn + c_bn log(1 - p_bn)) with constant a, c.
// Zero coefficients give an exactly zero gradient for that probability.
inline Tensor weighted_bce(const Tensor& probs, std::vector<double> a, std::vector<double> c) {
  const Shape& s = probs.shape();
  const Tensor p = clamp(probs, kProbEpsilon, 1.0 - kProbEpsilon);
  const Tensor log_p = log(p);
  const Tensor log_q = log(sub(Tensor::full(s, 1.0), p));
  const Tensor terms = add(mul(Tensor::from(s, std::move(a)), log_p), mul(Tensor::from(s, std::move(c)), log_q));
  return scale(sum(terms), -1.0);
}

inline void require_batch(const Tensor& probs, std::size_t batch, std::size_t classes, const char* op) {
  if (probs.rank() != 2 || probs.dim(0) != batch || probs.dim(1) != classes)
    throw ShapeError(std::string(op) + ": expected probabilities [" + std::to_string(batch) + "," +
                     std::to_string(classes) + "], got " + shape_str(probs.shape()));
}

}  // namespace detail

// Per sample, the sum over the classes of its own dataset; mean over the batch.
inline Tensor abnormality_loss(const Tensor& probs, const std::vector<LabelRecord>& labels, const ClassWeights& w) {
  const std::size_t batch = labels.size(), d = w.size();
  if (batch == 0) throw PreconditionError("abnormality_loss: empty batch");
  detail::require_batch(probs, batch, d, "abnormality_loss");
  std::vector<double> a(batch * d, 0.0), c(batch * d, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& l = labels[b];
    if (l.abnormal.size() != d || l.dataset_mask.size() != d) throw ShapeError("abnormality_loss: label size mismatch");
    for (std::size_t n = 0; n < d; ++n) {
      if (!l.dataset_mask[n]) continue;
      if (l.abnormal[n]) a[b * d + n] = w.w_pos[n] / double(batch);
      else c[b * d + n] = w.w_neg[n] / double(batch);
    }
  }
  return detail::weighted_bce(probs, std::move(a), std::move(c));
}

// Over all F spatial classes; samples without spatial labels contribute nothing.
inline Tensor location_loss(const Tensor& probs, const std::vector<LabelRecord>& labels, const ClassWeights& w) {
  const std::size_t batch = labels.size(), f = w.size();
  if (batch == 0) throw PreconditionError("location_loss: empty batch");
  detail::require_batch(probs, batch, f, "location_loss");
  std::vector<double> a(batch * f, 0.0), c(batch * f, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& l = labels[b];
    if (!l.spatial_active) continue;
    if (l.spatial.size() != f) throw ShapeError("location_loss: spatial label size mismatch");
    for (std::size_t m = 0; m < f; ++m) {
      if (l.spatial[m]) a[b * f + m] = w.w_pos[m] / double(batch);
      else c[b * f + m] = w.w_neg[m] / double(batch);
    }
  }
  return detail::weighted_bce(probs, std::move(a), std::move(c));
}

// (1/t) sum (s_i - p_i)^2 with t = 2 N N, averaged over the batch.
// Samples with seg_active false contribute zero.
inline Tensor segmentation_loss(const Tensor& pred, const std::vector<LabelRecord>& labels) {
  const std::size_t batch = labels.size();
  if (batch == 0) throw PreconditionError("segmentation_loss: empty batch");
  if (pred.rank() != 4 || pred.dim(0) != batch || pred.dim(1) != 2)
    throw ShapeError("segmentation_loss: expected [" + std::to_string(batch) + ",2,N,N], got " + shape_str(pred.shape()));
  const std::size_t t = 2 * pred.dim(2) * pred.dim(3);
  std::vector<double> target(pred.numel(), 0.0), weight(pred.numel(), 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& l = labels[b];
    if (!l.seg_active) continue;
    if (l.seg.size() != t) throw ShapeError("segmentation_loss: mask has " + std::to_string(l.seg.size()) +
                                            " entries, prediction has " + std::to_string(t));
    for (std::size_t i = 0; i < t; ++i) {
      target[b * t + i] = double(l.seg[i]);
      weight[b * t + i] = 1.0 / (double(t) * double(batch));
    }
  }
  const Tensor diff = sub(pred, Tensor::from(pred.shape(), std::move(target)));
  return sum(mul(Tensor::from(pred.shape(), std::move(weight)), mul(diff, diff)));
}

enum LossTerm : unsigned { kAbn = 1u, kSeg = 2u, kLoc = 4u, kAllLosses = 7u };

struct LossWeights {
  double abn = 1.0, seg = 1.0, loc = 1.0;
};

struct LossParts {
  Tensor total, abn, seg, loc;  // disabled parts stay undefined
};

// L_Glob = L_Abn + L_Seg + L_Loc. Heads absent from the model or
// terms missing from `enabled` are left out of the graph.
inline LossParts global_loss(const Tensor& abn_probs, const Tensor& loc_probs, const Tensor& seg_map,
                             const std::vector<LabelRecord>& labels, const ClassWeights& abn_w, const ClassWeights& loc_w,
                             unsigned enabled = kAllLosses, const LossWeights& lw = {}) {
  LossParts out;
  if (!(enabled & kAbn)) throw ConfigError("global_loss: the abnormality term is always required");
  out.abn = abnormality_loss(abn_probs, labels, abn_w);
  out.total = lw.abn == 1.0 ? out.abn : scale(out.abn, lw.abn);
  if ((enabled & kSeg) && seg_map.defined()) {
    out.seg = segmentation_loss(seg_map, labels);
    out.total = add(out.total, lw.seg == 1.0 ? out.seg : scale(out.seg, lw.seg));
  }
  if ((enabled & kLoc) && loc_probs.defined()) {
    out.loc = location_loss(loc_probs, labels, loc_w);
    out.total = add(out.total, lw.loc == 1.0 ? out.loc : scale(out.loc, lw.loc));
  }
  return out;
}

}  // namespace cxrmt
