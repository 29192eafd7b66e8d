#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <string>

#include "cxrmt/image_io.hpp"
#include "cxrmt/normalize.hpp"
#include "cxrmt/rng.hpp"
#include "cxrmt/synth.hpp"

using namespace cxrmt;

namespace {

Image from_values(std::size_t w, std::size_t h, std::vector<double> v) {
  Image img(w, h);
  img.pixels = std::move(v);
  return img;
}

Image bimodal(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Image img(n, n, 0.0, 0.0, 1.0);
  for (auto& p : img.pixels) p = rng.bernoulli(0.4) ? 0.25 + 0.05 * rng.normal() : 0.7 + 0.08 * rng.normal();
  return img;
}

// Sliding median written the slow way: copy, sort, take the middle.
std::vector<double> oracle_median(const std::vector<double>& v, std::size_t window) {
  const long n = long(v.size()), half = long(window / 2);
  auto mirror = [n](long i) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return std::size_t(i);
  };
  std::vector<double> out(v.size());
  for (long i = 0; i < n; ++i) {
    std::vector<double> w;
    for (long k = i - half; k <= i + half; ++k) w.push_back(v[mirror(k)]);
    std::sort(w.begin(), w.end());
    out[std::size_t(i)] = w[std::size_t(half)];
  }
  return out;
}

std::vector<double> oracle_gaussian(const std::vector<double>& v, double sigma) {
  const long n = long(v.size()), radius = long(std::ceil(3 * sigma));
  auto mirror = [n](long i) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return std::size_t(i);
  };
  double norm = 0;
  for (long k = -radius; k <= radius; ++k) norm += std::exp(-double(k * k) / (2 * sigma * sigma));
  std::vector<double> out(v.size(), 0.0);
  for (long i = 0; i < n; ++i)
    for (long k = -radius; k <= radius; ++k)
      out[std::size_t(i)] += std::exp(-double(k * k) / (2 * sigma * sigma)) / norm * v[mirror(i - k)];
  return out;
}

std::vector<double> read_hexfloats(const std::string& path) {
  std::ifstream in(path);
  std::vector<double> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(std::strtod(line.c_str(), nullptr));
  return out;
}

}  // namespace

TEST(Histogram, TwoByTwoTwoBins) {
  auto h = compute_histogram(from_values(2, 2, {0, 0, 1, 1}), 2);
  EXPECT_EQ(h.counts, (std::vector<double>{2, 2}));
  EXPECT_EQ(h.edges.front(), 0.0);
  EXPECT_EQ(h.edges.back(), 1.0);
}

TEST(Histogram, ConstantImageIsDegenerate) {
  EXPECT_THROW(compute_histogram(Image(4, 4, 0.3), 16), DegenerateImageError);
  EXPECT_THROW(normalize_image(Image(4, 4, 0.3)), DegenerateImageError);
}

TEST(Histogram, EmptyImageRejected) { EXPECT_THROW(compute_histogram(Image(), 16), PreconditionError); }

TEST(Histogram, BimodalMatchesDirectTally) {
  const auto img = bimodal(64, 11);
  const auto h = compute_histogram(img, 64);
  const double lo = *std::min_element(img.pixels.begin(), img.pixels.end());
  const double hi = *std::max_element(img.pixels.begin(), img.pixels.end());
  std::vector<double> tally(64, 0.0);
  for (double v : img.pixels) {
    std::size_t b = 0;
    while (b + 1 < 64 && v >= lo + double(b + 1) * (hi - lo) / 64.0) ++b;
    tally[b] += 1.0;
  }
  EXPECT_EQ(h.counts, tally);
  EXPECT_EQ(h.total(), 64.0 * 64.0);
  for (std::size_t i = 0; i + 1 < h.edges.size(); ++i) EXPECT_LT(h.edges[i], h.edges[i + 1]);
}

TEST(Denoise, FlatHistogramUnchanged) {
  Histogram h;
  h.counts.assign(40, 7.0);
  for (int i = 0; i <= 40; ++i) h.edges.push_back(i);
  auto d = denoise_histogram(h, 2.0, 5);
  for (double c : d.counts) EXPECT_NEAR(c, 7.0, 1e-9);
}

TEST(Denoise, IsolatedSpikeRemoved) {
  Histogram h;
  h.counts.assign(32, 0.0);
  h.counts[13] = 500.0;
  for (int i = 0; i <= 32; ++i) h.edges.push_back(i);
  auto d = denoise_histogram(h, 1.0, 3);
  EXPECT_EQ(d.counts[13], 0.0);
}

TEST(Denoise, MatchesReferenceFilters) {
  Rng rng(5);
  Histogram h;
  for (int i = 0; i < 100; ++i) h.counts.push_back(100.0 + 30.0 * std::sin(i / 9.0) + rng.uniform(0, 20));
  for (int i : {3, 17, 50, 51, 98}) h.counts[std::size_t(i)] += 1000.0;
  for (int i = 0; i <= 100; ++i) h.edges.push_back(i);
  for (std::size_t window : {3u, 5u, 7u})
    for (double sigma : {0.7, 2.0, 3.5}) {
      auto d = denoise_histogram(h, sigma, window);
      auto ref = oracle_gaussian(oracle_median(h.counts, window), sigma);
      for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(d.counts[i], std::max(0.0, ref[i]), 1e-9);
    }
}

TEST(Denoise, SmoothHistogramKeepsMass) {
  Histogram h;
  for (int i = 0; i < 256; ++i) h.counts.push_back(50.0 + 40.0 * std::exp(-std::pow((i - 120) / 30.0, 2)));
  for (int i = 0; i <= 256; ++i) h.edges.push_back(i);
  auto d = denoise_histogram(h, 2.0, 5);
  EXPECT_NEAR(d.total(), h.total(), 0.01 * h.total());
  for (double c : d.counts) EXPECT_GE(c, 0.0);
}

TEST(Denoise, RejectsBadParameters) {
  Histogram h{{0, 1, 2, 3}, {1, 2, 3}};
  EXPECT_THROW(denoise_histogram(h, 0.0, 3), PreconditionError);
  EXPECT_THROW(denoise_histogram(h, 1.0, 4), PreconditionError);
  EXPECT_THROW(denoise_histogram(h, 1.0, 1), PreconditionError);
}

TEST(FindWindow, UniformQuantiles) {
  Histogram h;
  const int bins = 200;
  for (int i = 0; i < bins; ++i) h.counts.push_back(10.0);
  for (int i = 0; i <= bins; ++i) h.edges.push_back(double(i) / bins);
  auto w = find_window(h, 0.01);
  EXPECT_NEAR(w.low, 0.01, 1.0 / bins);
  EXPECT_NEAR(w.high, 0.99, 1.0 / bins);
}

TEST(FindWindow, TailMassBounds) {
  Histogram h{{0, 1, 2, 3}, {1, 2, 3}};
  EXPECT_THROW(find_window(h, 0.0), PreconditionError);
  EXPECT_THROW(find_window(h, 0.5), PreconditionError);
  EXPECT_THROW(find_window(h, -0.1), PreconditionError);
}

TEST(FindWindow, AllMassInOneBinIsDegenerate) {
  Histogram h{{0, 1, 2, 3, 4}, {0, 9, 0, 0}};
  EXPECT_THROW(find_window(h, 0.01), DegenerateImageError);
}

TEST(FindWindow, BackgroundSpikeExcluded) {
  // body intensities in [0.3, 0.9], a solid black collimation border at 0
  Rng rng(21);
  Image img(64, 64, 0.0);
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x)
      img.at(x, y) = (y < 6 || y >= 58) ? 0.0 : std::clamp(0.6 + 0.1 * rng.normal(), 0.3, 0.9);
  const NormalizationParams p;
  const auto raw = compute_histogram(img, p.bins);
  EXPECT_GT(raw.counts[0], 700.0);
  const auto den = denoise_histogram(raw, p.gaussian_sigma, p.median_window);
  const auto w = find_window(den, p.tail_mass);
  EXPECT_GT(w.low, 0.25);

  // quantile oracle on the denoised counts
  const double total = den.total();
  std::size_t first = 0, last = 0;
  double cum = 0;
  for (std::size_t i = 0; i < den.bin_count(); ++i) {
    cum += den.counts[i];
    if (cum < p.tail_mass * total) first = i + 1;
    if (cum <= (1 - p.tail_mass) * total) last = i;
  }
  EXPECT_EQ(w.low, den.edges[first]);
  EXPECT_EQ(w.high, den.edges[last + 1]);
}

TEST(NormalizeImage, ExactSpanMapsToUnitInterval) {
  const Image img = from_values(2, 1, {2.0, 6.0});
  const auto out = apply_window(img, {2.0, 6.0});
  EXPECT_EQ(out.pixels, (std::vector<double>{0.0, 1.0}));
}

TEST(NormalizeImage, AffineInputGivesSameOutput) {
  const auto img = bimodal(64, 3);
  Image t = img;
  for (auto& v : t.pixels) v = 3.5 * v + 100.0;
  const auto a = normalize_image(img), b = normalize_image(t);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.pixels[i], b.pixels[i], 2.0 / 256);
}

TEST(NormalizeImage, SmallBinCountRejected) {
  NormalizationParams p;
  p.bins = 8;
  EXPECT_THROW(normalize_image(bimodal(16, 1), p), PreconditionError);
}

TEST(NormalizeProperties, RandomSyntheticRadiographs) {
  auto spec = default_synthetic_spec(64, 100, 77);
  const auto corpus = generate_corpus(spec);
  const NormalizationParams p;
  Rng rng(78);
  double worst_affine = 0, worst_idem = 0, worst_window = 0;
  for (const auto& s : corpus.images) {
    const Image& img = s.sample.image;
    const auto w = estimate_window(img, p);
    const auto once = apply_window(img, w);
    for (double v : once.pixels) ASSERT_TRUE(v >= 0.0 && v <= 1.0);

    const double a = rng.uniform(0.1, 10.0), b = rng.uniform(-500.0, 500.0);
    Image t = img;
    for (auto& v : t.pixels) v = a * v + b;
    const auto wt = estimate_window(t, p);
    const auto lohi = std::minmax_element(img.pixels.begin(), img.pixels.end());
    const double bin = a * (*lohi.second - *lohi.first) / double(p.bins);
    worst_window = std::max({worst_window, std::abs(wt.low - (a * w.low + b)) / bin,
                             std::abs(wt.high - (a * w.high + b)) / bin});
    const auto ot = apply_window(t, wt);
    for (std::size_t i = 0; i < once.size(); ++i) worst_affine = std::max(worst_affine, std::abs(ot.pixels[i] - once.pixels[i]));

    // Re-windowing on the raw histogram of the windowed image: its quantile
    // bounds sit next to 0 and 1. The full pipeline is checked separately.
    const auto twice = apply_window(once, find_window(compute_histogram(once, p.bins), p.tail_mass));
    for (std::size_t i = 0; i < once.size(); ++i) worst_idem = std::max(worst_idem, std::abs(twice.pixels[i] - once.pixels[i]));
  }
  EXPECT_LE(worst_window, 1.0);
  EXPECT_LE(worst_affine, 2.0 / double(p.bins));
  EXPECT_LE(worst_idem, 2.0 * p.tail_mass);
}

// The median filter treats the clamped mass piled into the end bins of an
// already windowed image as a spike and removes it, so a second full pass
// trims a further tail. The drift is bounded by how far the window moves.
TEST(NormalizeProperties, SecondPassDriftMatchesWindowShift) {
  const auto corpus = generate_corpus(default_synthetic_spec(64, 20, 79));
  for (const auto& s : corpus.images) {
    const auto once = normalize_image(s.sample.image);
    const auto w = estimate_window(once, {});
    const auto twice = apply_window(once, w);
    EXPECT_GE(w.low, 0.0);
    EXPECT_LE(w.high, 1.0);
    const double bound = std::max(w.low, 1.0 - w.high) / (w.high - w.low) + 1e-12;
    for (std::size_t i = 0; i < once.size(); ++i) ASSERT_LE(std::abs(twice.pixels[i] - once.pixels[i]), bound);
  }
}

TEST(NormalizeGolden, BitExactRegression) {
  const auto img = read_image(std::string(CXRMT_TEST_DATA) + "/golden_radiograph.pgm");
  const auto expected = read_hexfloats(std::string(CXRMT_TEST_DATA) + "/golden_normalized.txt");
  const auto out = normalize_image(img);
  ASSERT_EQ(out.size(), expected.size());
  for (std::size_t i = 0; i < out.size(); ++i) ASSERT_EQ(out.pixels[i], expected[i]) << "pixel " << i;
}
