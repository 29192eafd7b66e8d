#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "cxrmt/agreement.hpp"
#include "cxrmt/data.hpp"
#include "cxrmt/image.hpp"
#include "cxrmt/image_io.hpp"
#include "cxrmt/manifest.hpp"
#include "cxrmt/rng.hpp"

namespace cxrmt {

enum class LesionKind {
  small_blob,
  large_blob,
  dense_blob,
  patch,
  diffuse,
  streak,
  reticular,
  fluid_level,
  enlarged_heart,
  hyperinflation,
  dark_apex,
  pleural_rim,
  hilar_blob,
  extrapulmonary_blob,
  hernia_blob,
};

// size and amplitude are in units of the image side and of tissue density
// respectively; their exact meaning depends on the kind.
struct ClassRule {
  LesionKind kind = LesionKind::small_blob;
  double prevalence = 0.2;
  double size_min = 0.02, size_max = 0.04;
  double amp_min = 0.1, amp_max = 0.2;
  bool spatial = false;          // contributes location labels on spatial datasets
  double multiple_prob = 0.0;    // chance of a second lesion of the same class
};

struct ReaderNoise {
  std::string name;
  double flip = 0.0;
};

struct SyntheticSpec {
  std::size_t image_size = 64;
  std::size_t count = 200;
  double images_per_patient = 3.3;
  double dataset_b_fraction = 0.5;
  double seg_fraction = 1.0;
  Taxonomy taxonomy = default_taxonomy();
  std::vector<ClassRule> rules;  // one per taxonomy class
  // Reader 0 is the original labeller, whose labels populate the manifest.
  std::vector<ReaderNoise> readers{{"original", 0.0}, {"reader1", 0.04}, {"reader2", 0.04}};
  double boundary_boost = 0.35;  // extra flip probability for faint findings
  double distractor_prob = 0.1;  // faint lesion-like structure on negatives
  std::string reader_dataset = "B";
  std::uint64_t seed = 1;
};

inline std::vector<ClassRule> default_class_rules() {
  using K = LesionKind;
  auto r = [](K k, double s0, double s1, double a0, double a1, bool sp = false, double mult = 0.0) {
    return ClassRule{k, 0.2, s0, s1, a0, a1, sp, mult};
  };
  return {
      // A
      r(K::patch, 0.05, 0.08, 0.10, 0.20),
      r(K::enlarged_heart, 0.0, 0.0, 0.25, 0.45),
      r(K::fluid_level, 0.20, 0.40, 0.20, 0.35),
      r(K::patch, 0.06, 0.10, 0.06, 0.14),
      r(K::large_blob, 0.05, 0.08, 0.15, 0.30),
      r(K::small_blob, 0.015, 0.03, 0.08, 0.20),
      r(K::patch, 0.07, 0.10, 0.10, 0.20),
      r(K::dark_apex, 0.25, 0.45, 0.5, 0.9),
      r(K::patch, 0.06, 0.09, 0.20, 0.30),
      r(K::diffuse, 0.0, 0.0, 0.06, 0.14),
      r(K::hyperinflation, 0.06, 0.12, 0.04, 0.08),
      r(K::reticular, 0.10, 0.18, 0.06, 0.14),
      r(K::pleural_rim, 0.10, 0.20, 0.15, 0.30),
      r(K::hernia_blob, 0.04, 0.06, 0.15, 0.30),
      // B
      r(K::small_blob, 0.015, 0.03, 0.08, 0.20, true, 0.2),
      r(K::large_blob, 0.05, 0.08, 0.15, 0.30, true),
      r(K::dense_blob, 0.012, 0.02, 0.30, 0.50, true, 0.2),
      r(K::patch, 0.06, 0.10, 0.06, 0.14, true),
      r(K::streak, 0.04, 0.07, 0.10, 0.20, true),
      r(K::reticular, 0.10, 0.18, 0.06, 0.14, true),
      r(K::extrapulmonary_blob, 0.03, 0.05, 0.20, 0.35),
      r(K::enlarged_heart, 0.0, 0.0, 0.25, 0.45),
      r(K::hyperinflation, 0.06, 0.12, 0.04, 0.08),
      r(K::fluid_level, 0.20, 0.40, 0.20, 0.35, true),
      r(K::patch, 0.05, 0.08, 0.10, 0.20, true),
      r(K::hilar_blob, 0.03, 0.05, 0.12, 0.25, true),
  };
}

inline SyntheticSpec default_synthetic_spec(std::size_t image_size = 64, std::size_t count = 200, std::uint64_t seed = 1) {
  SyntheticSpec s;
  s.image_size = image_size;
  s.count = count;
  s.seed = seed;
  s.rules = default_class_rules();
  return s;
}

struct SyntheticImage {
  LabeledSample sample;          // image holds raw 16-bit values in [0, 65535]
  std::vector<double> visibility;  // per class in [0,1]; 1 for clean negatives
  std::vector<std::uint8_t> distractor;  // per class
};

struct Corpus {
  SyntheticSpec spec;
  std::vector<SyntheticImage> images;
  ReaderMatrix readers;  // reader_dataset images x its classes

  std::vector<LabeledSample> samples() const {
    std::vector<LabeledSample> out;
    out.reserve(images.size());
    for (const auto& i : images) out.push_back(i.sample);
    return out;
  }
};

namespace synth_detail {

struct Ellipse {
  double cx = 0, cy = 0, rx = 1, ry = 1;
  double q(double u, double v) const {
    const double a = (u - cx) / rx, b = (v - cy) / ry;
    return a * a + b * b;
  }
  bool inside(double u, double v) const { return q(u, v) <= 1.0; }
};

struct Anatomy {
  Ellipse body, lung[2], heart;  // lung[0] on the image left (patient's right)
  double spine_x = 0.5;
};

inline Anatomy patient_anatomy(Rng& rng) {
  Anatomy a;
  const double dx = rng.uniform(-0.02, 0.02);
  const double ls = rng.uniform(0.92, 1.08);
  const double hs = rng.uniform(0.92, 1.08);
  a.body = {0.5 + dx, 0.55, 0.47, 0.52};
  a.lung[0] = {0.30 + dx, 0.46, 0.145 * ls, 0.30 * ls};
  a.lung[1] = {0.70 + dx, 0.46, 0.145 * ls, 0.30 * ls};
  a.heart = {0.56 + dx, 0.63, 0.14 * hs, 0.11 * hs};
  a.spine_x = 0.5 + dx;
  return a;
}

// Location labels are 1-based region ids.
constexpr int kLeftLobe = 1, kRightLobe = 2, kDiffused = 8, kMultiple = 9;

struct Placement {
  double u = 0, v = 0;
  int side = 0;  // 0 image-left lung, 1 image-right lung
  int zone = 0;  // 0 lower .. 4 upper
};

// Radiological convention: the patient's left lung appears on the image right.
inline int side_label(int side) { return side == 1 ? kLeftLobe : kRightLobe; }
inline int zone_label(int zone) { return 3 + zone; }

inline Placement place_in_lung(const Anatomy& a, Rng& rng, int side = -1, int zone = -1) {
  Placement p;
  p.side = side >= 0 ? side : int(rng.index(2));
  p.zone = zone >= 0 ? zone : int(rng.index(5));
  const Ellipse& L = a.lung[p.side];
  const double top = L.cy - L.ry, height = 2.0 * L.ry;
  // keep to the inner 60% of the zone band so the label is unambiguous
  const double f = (double(p.zone) + rng.uniform(0.2, 0.8)) / 5.0;
  p.v = top + height * (1.0 - f);
  const double t = (p.v - L.cy) / L.ry;
  const double half = L.rx * std::sqrt(std::max(0.0, 1.0 - t * t));
  p.u = L.cx + 0.55 * half * rng.uniform(-1.0, 1.0);
  return p;
}

struct Canvas {
  std::size_t n;
  std::vector<double> density;
  double u(std::size_t x) const { return (double(x) + 0.5) / double(n); }
  double v(std::size_t y) const { return (double(y) + 0.5) / double(n); }
  double& at(std::size_t x, std::size_t y) { return density[y * n + x]; }

  template <class F>
  void each(F&& f) {
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) f(x, y, u(x), v(y));
  }
};

inline void add_blob(Canvas& c, double cu, double cv, double radius, double amp) {
  const double inv = 1.0 / (radius * radius);
  c.each([&](std::size_t x, std::size_t y, double u, double v) {
    const double d2 = ((u - cu) * (u - cu) + (v - cv) * (v - cv)) * inv;
    if (d2 < 9.0) c.at(x, y) += amp * std::exp(-d2);
  });
}

inline bool in_lungs(const Anatomy& a, double u, double v) {
  return (a.lung[0].inside(u, v) || a.lung[1].inside(u, v)) && !a.heart.inside(u, v);
}

struct Finding {
  std::vector<Placement> where;
  bool diffuse = false;
};

inline void render_anatomy(Canvas& c, const Anatomy& a, double lung_shift, Rng& rng) {
  const double phase = rng.uniform(0.0, 6.283);
  c.each([&](std::size_t x, std::size_t y, double u, double v) {
    double d = 0.04;
    if (a.body.inside(u, v)) d = 0.55;
    if (d > 0.1 && std::abs(u - a.spine_x) < 0.035) d = 0.78;
    if (in_lungs(a, u, v)) d = 0.22 - lung_shift + 0.025 * std::sin(40.0 * u + phase) * std::sin(33.0 * v);
    if (a.heart.inside(u, v)) d = 0.72;
    c.at(x, y) = d;
  });
}

// Adds class lesions to the canvas and returns where they went.
inline Finding render_lesion(Canvas& c, const Anatomy& a, const ClassRule& rule, double size, double amp, Rng& rng) {
  using K = LesionKind;
  Finding f;
  const std::size_t lesions = rule.multiple_prob > 0 && rng.bernoulli(rule.multiple_prob) ? 2 : 1;
  switch (rule.kind) {
    case K::small_blob:
    case K::large_blob:
    case K::dense_blob:
      for (std::size_t i = 0; i < lesions; ++i) {
        auto p = place_in_lung(a, rng);
        add_blob(c, p.u, p.v, size, amp);
        f.where.push_back(p);
      }
      break;
    case K::hilar_blob: {
      auto p = place_in_lung(a, rng, -1, 2);
      const auto& L = a.lung[p.side];
      p.u = L.cx + (p.side == 0 ? 0.5 : -0.5) * L.rx;
      add_blob(c, p.u, p.v, size, amp);
      f.where.push_back(p);
      break;
    }
    case K::patch: {
      auto p = place_in_lung(a, rng);
      const double ang = rng.uniform(0.0, 3.14159), ca = std::cos(ang), sa = std::sin(ang);
      c.each([&](std::size_t x, std::size_t y, double u, double v) {
        if (!in_lungs(a, u, v)) return;
        const double du = u - p.u, dv = v - p.v;
        const double s = (ca * du + sa * dv) / size, t = (-sa * du + ca * dv) / (0.7 * size);
        const double q = s * s + t * t;
        if (q < 9.0) c.at(x, y) += amp * std::exp(-q);
      });
      f.where.push_back(p);
      break;
    }
    case K::diffuse:
      c.each([&](std::size_t x, std::size_t y, double u, double v) {
        if (in_lungs(a, u, v)) c.at(x, y) += amp * (0.7 + 0.3 * std::sin(57.0 * u) * std::sin(61.0 * v));
      });
      f.diffuse = true;
      break;
    case K::streak: {
      auto p = place_in_lung(a, rng);
      const double ang = rng.uniform(0.0, 3.14159), ca = std::cos(ang), sa = std::sin(ang);
      const double half = 1.5 * size, w = 0.012;
      c.each([&](std::size_t x, std::size_t y, double u, double v) {
        const double du = u - p.u, dv = v - p.v;
        const double along = ca * du + sa * dv, across = -sa * du + ca * dv;
        if (std::abs(along) > half) return;
        c.at(x, y) += amp * std::exp(-(across * across) / (w * w));
      });
      f.where.push_back(p);
      break;
    }
    case K::reticular: {
      auto p = place_in_lung(a, rng);
      const double ang = rng.uniform(0.0, 3.14159), ca = std::cos(ang), sa = std::sin(ang);
      c.each([&](std::size_t x, std::size_t y, double u, double v) {
        if (!in_lungs(a, u, v)) return;
        const double d2 = ((u - p.u) * (u - p.u) + (v - p.v) * (v - p.v)) / (size * size);
        if (d2 > 4.0) return;
        const double wave = 0.5 + 0.5 * std::sin(2.0 * M_PI * (ca * u + sa * v) / 0.035);
        c.at(x, y) += amp * wave * std::exp(-d2);
      });
      f.where.push_back(p);
      break;
    }
    case K::fluid_level: {
      const int side = int(rng.index(2));
      const auto& L = a.lung[side];
      const double level = L.cy + L.ry - 2.0 * L.ry * size;
      c.each([&](std::size_t x, std::size_t y, double u, double v) {
        if (!L.inside(u, v) || a.heart.inside(u, v)) return;
        const double meniscus = level - 0.04 * std::abs(u - L.cx) / L.rx;
        const double s = (v - meniscus) / 0.01;
        c.at(x, y) += amp / (1.0 + std::exp(-s));
      });
      Placement p;
      p.side = side;
      p.zone = 0;
      p.u = L.cx;
      p.v = L.cy + 0.9 * L.ry;
      f.where.push_back(p);
      break;
    }
    case K::dark_apex: {
      const int side = int(rng.index(2));
      const auto& L = a.lung[side];
      const double lateral = side == 0 ? -1.0 : 1.0;
      c.each([&](std::size_t x, std::size_t y, double u, double v) {
        if (!L.inside(u, v) || v > L.cy - (1.0 - 2.0 * size) * L.ry * 0.5) return;
        const double lat = lateral * (u - L.cx) / L.rx;
        if (lat > 0.1 && L.q(u, v) > 1.0 - size) c.at(x, y) = std::max(0.02, c.at(x, y) - 0.2 * amp);
      });
      break;
    }
    case K::pleural_rim: {
      const int side = int(rng.index(2));
      const auto& L = a.lung[side];
      const double lateral = side == 0 ? -1.0 : 1.0;
      c.each([&](std::size_t x, std::size_t y, double u, double v) {
        if (!L.inside(u, v)) return;
        if (lateral * (u - L.cx) > 0.0 && L.q(u, v) > 1.0 - size) c.at(x, y) += amp;
      });
      break;
    }
    case K::extrapulmonary_blob: {
      double u = 0, v = 0;
      for (int tries = 0; tries < 100; ++tries) {
        u = rng.uniform(0.1, 0.9);
        v = rng.uniform(0.15, 0.95);
        if (a.body.inside(u, v) && !in_lungs(a, u, v) && !a.heart.inside(u, v)) break;
      }
      add_blob(c, u, v, size, amp);
      break;
    }
    case K::hernia_blob:
      add_blob(c, a.heart.cx - 0.02, a.heart.cy + a.heart.ry * 0.9, size, amp);
      break;
    case K::enlarged_heart:
    case K::hyperinflation:
      break;  // applied to the anatomy before rendering
  }
  return f;
}

}  // namespace synth_detail

// Renders one image of the given patient anatomy. Kept separate so that tests
// can exercise individual kinds.
inline SyntheticImage generate_image(const SyntheticSpec& spec, std::size_t dataset, const synth_detail::Anatomy& patient,
                                     std::uint64_t seed) {
  using namespace synth_detail;
  const auto& tax = spec.taxonomy;
  const std::size_t n = spec.image_size, d = tax.num_classes();
  Rng rng(seed);

  SyntheticImage out;
  auto& L = out.sample.labels;
  L.dataset_mask = tax.mask_for(dataset);
  L.abnormal.assign(d, 0);
  L.spatial.assign(kSpatialClasses, 0);
  out.visibility.assign(d, 1.0);
  out.distractor.assign(d, 0);

  std::vector<double> size(d, 0.0), amp(d, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    if (!L.dataset_mask[k]) continue;
    const auto& r = spec.rules[k];
    if (rng.bernoulli(r.prevalence)) {
      L.abnormal[k] = 1;
      const double fs = rng.uniform(), fa = rng.uniform();
      size[k] = r.size_min + fs * (r.size_max - r.size_min);
      amp[k] = r.amp_min + fa * (r.amp_max - r.amp_min);
      out.visibility[k] = r.size_max > r.size_min ? 0.5 * (fs + fa) : fa;
    } else if ((r.kind == LesionKind::small_blob || r.kind == LesionKind::large_blob) &&
               rng.bernoulli(spec.distractor_prob)) {
      out.distractor[k] = 1;
      size[k] = r.size_min;
      amp[k] = 0.4 * r.amp_min;
    }
  }

  Anatomy a = patient;
  double lung_shift = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    if (!L.abnormal[k]) continue;
    const auto& r = spec.rules[k];
    if (r.kind == LesionKind::enlarged_heart) {
      a.heart.rx *= 1.0 + amp[k];
      a.heart.ry *= 1.0 + 0.6 * amp[k];
    } else if (r.kind == LesionKind::hyperinflation) {
      for (auto& l : a.lung) {
        l.rx *= 1.0 + 0.5 * size[k];
        l.ry *= 1.0 + size[k];
      }
      lung_shift = std::max(lung_shift, amp[k]);
    }
  }

  Canvas c{n, std::vector<double>(n * n, 0.0)};
  render_anatomy(c, a, lung_shift, rng);

  std::set<std::pair<int, int>> places;
  bool diffuse = false, spatial_positive = false;
  for (std::size_t k = 0; k < d; ++k) {
    if (!L.abnormal[k] && !out.distractor[k]) continue;
    const auto& r = spec.rules[k];
    if (out.distractor[k]) {
      auto p = place_in_lung(a, rng);
      add_blob(c, p.u, p.v, size[k], amp[k]);
      continue;
    }
    Finding f = render_lesion(c, a, r, size[k], amp[k], rng);
    if (!(r.spatial && tax.datasets[dataset].has_spatial)) continue;
    spatial_positive = true;
    diffuse = diffuse || f.diffuse;
    for (const auto& p : f.where) places.emplace(p.side, p.zone);
  }
  if (spatial_positive) {
    L.spatial_active = true;
    for (const auto& [side, zone] : places) {
      L.spatial[std::size_t(side_label(side) - 1)] = 1;
      L.spatial[std::size_t(zone_label(zone) - 1)] = 1;
    }
    if (diffuse) L.spatial[kDiffused - 1] = 1;
    if (places.size() + (diffuse ? 1 : 0) > 1) L.spatial[kMultiple - 1] = 1;
  }

  // acquisition: gain, offset, gamma, noise, collimation border, burnt-in text
  const double gain = rng.uniform(0.6, 1.0), offset = rng.uniform(0.02, 0.12), gamma = rng.uniform(0.8, 1.25);
  Image img(n, n, 0.0, 0.0, 65535.0);
  for (std::size_t i = 0; i < n * n; ++i) {
    const double v = offset + gain * std::pow(std::clamp(c.density[i], 0.0, 1.0), gamma) + 0.01 * rng.normal();
    img.pixels[i] = std::round(std::clamp(v, 0.0, 1.0) * 65535.0);
  }
  const std::size_t border = 1 + rng.index(std::max<std::size_t>(1, n / 16));
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x)
      if (y < border || y >= n - border) img.at(x, y) = 0.0;
  if (rng.bernoulli(0.7)) {
    const std::size_t tw = std::max<std::size_t>(2, n / 10), th = std::max<std::size_t>(1, n / 32);
    const std::size_t x0 = 1 + rng.index(n / 8), y0 = border + 1;
    for (std::size_t y = y0; y < std::min(n, y0 + th); ++y)
      for (std::size_t x = x0; x < std::min(n, x0 + tw); ++x) img.at(x, y) = 65535.0;
  }
  out.sample.image = std::move(img);

  L.seg.assign(2 * n * n, 0);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double u = c.u(x), v = c.v(y);
      L.seg[y * n + x] = in_lungs(a, u, v) ? 1 : 0;
      L.seg[n * n + y * n + x] = a.heart.inside(u, v) ? 1 : 0;
    }
  L.seg_active = rng.bernoulli(spec.seg_fraction);
  if (!L.seg_active) L.seg.clear();
  return out;
}

inline void validate(const SyntheticSpec& spec) {
  if (spec.image_size < 16) throw ConfigError("synthetic image size must be at least 16");
  if (spec.count == 0) throw ConfigError("synthetic corpus needs at least one image");
  if (spec.rules.size() != spec.taxonomy.num_classes())
    throw ConfigError("one class rule per taxonomy class required");
  if (!(spec.images_per_patient >= 1.0)) throw ConfigError("images_per_patient must be >= 1");
  if (spec.readers.size() < 2) throw ConfigError("at least two readers required");
  if (!spec.taxonomy.find(spec.reader_dataset)) throw ConfigError("reader_dataset is not in the taxonomy");
  for (const auto& r : spec.rules)
    if (!(r.prevalence >= 0.0 && r.prevalence <= 1.0)) throw ConfigError("prevalence must lie in [0,1]");
}

inline Corpus generate_corpus(const SyntheticSpec& spec) {
  validate(spec);
  Corpus corpus;
  corpus.spec = spec;
  const auto& tax = spec.taxonomy;
  const std::size_t b = tax.datasets.size() > 1 ? 1 : 0;

  Rng plan(derive_seed(spec.seed, "patients"));
  const double p_stop = 1.0 / spec.images_per_patient;
  std::size_t patient = 0;
  while (corpus.images.size() < spec.count) {
    const std::uint64_t pseed = derive_seed(spec.seed, "patient" + std::to_string(patient));
    Rng prng(pseed);
    const auto anatomy = synth_detail::patient_anatomy(prng);
    const std::size_t ds = plan.bernoulli(spec.dataset_b_fraction) ? b : 0;
    std::size_t k = 1;
    while (!plan.bernoulli(p_stop)) ++k;
    for (std::size_t j = 0; j < k && corpus.images.size() < spec.count; ++j) {
      const std::size_t idx = corpus.images.size();
      auto img = generate_image(spec, ds, anatomy, derive_seed(spec.seed, std::uint64_t(idx)));
      char id[32];
      std::snprintf(id, sizeof id, "img%05zu", idx);
      char pid[32];
      std::snprintf(pid, sizeof pid, "p%04zu", patient);
      auto& s = img.sample;
      s.image_id = id;
      s.patient_id = pid;
      s.dataset_id = tax.datasets[ds].id;
      s.image_path = "images/" + s.image_id + ".png";
      s.mask_path = s.labels.seg_active ? "masks/" + s.image_id + "_mask.png" : "";
      corpus.images.push_back(std::move(img));
    }
    ++patient;
  }

  // reader study over the reader dataset's images and classes
  const std::size_t rd = tax.index_of(spec.reader_dataset);
  const std::size_t off = tax.offset(rd), nc = tax.datasets[rd].classes.size();
  std::vector<std::size_t> cases;
  std::vector<std::string> case_ids, abns, readers;
  for (std::size_t i = 0; i < corpus.images.size(); ++i)
    if (corpus.images[i].sample.dataset_id == spec.reader_dataset) {
      cases.push_back(i);
      case_ids.push_back(corpus.images[i].sample.image_id);
    }
  for (std::size_t k = 0; k < nc; ++k) abns.push_back(tax.qualified_names()[off + k]);
  for (const auto& r : spec.readers) readers.push_back(r.name);
  if (cases.empty()) return corpus;
  ReaderMatrix m(case_ids, abns, readers, 0);
  for (std::size_t c = 0; c < cases.size(); ++c) {
    const auto& img = corpus.images[cases[c]];
    for (std::size_t r = 0; r < readers.size(); ++r) {
      Rng rng(derive_seed(derive_seed(spec.seed, "reader" + std::to_string(r)), std::uint64_t(cases[c])));
      for (std::size_t k = 0; k < nc; ++k) {
        const std::uint8_t truth = img.sample.labels.abnormal[off + k];
        double p = spec.readers[r].flip;
        if (p > 0.0) {
          if (truth) p += spec.boundary_boost * (1.0 - img.visibility[off + k]) * (1.0 - img.visibility[off + k]);
          else if (img.distractor[off + k]) p += 0.5 * spec.boundary_boost;
        }
        m.set(c, k, r, std::uint8_t(truth ^ (rng.bernoulli(std::min(p, 1.0)) ? 1 : 0)));
      }
    }
  }
  corpus.readers = std::move(m);
  return corpus;
}

// Writes images/, masks/, manifest.csv and annotations.csv under dir.
inline void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  const std::size_t n = corpus.spec.image_size;
  for (const auto& img : corpus.images) {
    write_image(dir / img.sample.image_path, img.sample.image, 16);
    if (img.sample.labels.seg_active)
      write_image(dir / img.sample.mask_path, encode_mask(img.sample.labels.seg, n), 8);
  }
  write_manifest(dir / "manifest.csv", corpus.samples(), corpus.spec.taxonomy);
  if (corpus.readers.readers() > 0) write_annotations(dir / "annotations.csv", corpus.readers);
}

}  // namespace cxrmt
