#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "cxrmt/error.hpp"
#include "cxrmt/image.hpp"

namespace cxrmt {

// Pixel-value histogram h(x; I). counts become real-valued once smoothed.
struct Histogram {
  std::vector<double> edges;   // bin_count + 1, strictly increasing
  std::vector<double> counts;  // bin_count

  std::size_t bin_count() const { return counts.size(); }
  double total() const {
    double s = 0.0;
    for (double c : counts) s += c;
    return s;
  }
};

// Tight intensity window [low, high].
struct Window {
  double low = 0.0;
  double high = 1.0;
};

struct NormalizationParams {
  std::size_t bins = 256;
  double gaussian_sigma = 2.0;     // in bins
  std::size_t median_window = 5;   // in bins, odd
  double tail_mass = 0.005;        // per side
};

inline Histogram compute_histogram(const Image& image, std::size_t bin_count) {
  if (image.empty()) throw PreconditionError("compute_histogram: empty image");
  if (bin_count < 2) throw PreconditionError("compute_histogram: need at least 2 bins");
  const auto [lo_it, hi_it] = std::minmax_element(image.pixels.begin(), image.pixels.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!std::isfinite(lo) || !std::isfinite(hi)) throw NumericsError("compute_histogram: non-finite pixel");
  if (!(hi > lo)) throw DegenerateImageError("compute_histogram: constant image");

  Histogram h;
  h.edges.resize(bin_count + 1);
  const double width = (hi - lo) / double(bin_count);
  for (std::size_t i = 0; i < bin_count; ++i) h.edges[i] = lo + double(i) * width;
  h.edges[bin_count] = hi;
  h.counts.assign(bin_count, 0.0);
  const double inv = double(bin_count) / (hi - lo);
  for (double v : image.pixels) {
    auto bin = std::size_t((v - lo) * inv);
    h.counts[std::min(bin, bin_count - 1)] += 1.0;
  }
  return h;
}

namespace detail {

// Whole-sample symmetric reflection: (d c b a | a b c d | d c b a).
inline std::size_t reflect_index(long i, std::size_t n) {
  const long len = long(n);
  if (len == 1) return 0;
  const long period = 2 * len;
  i %= period;
  if (i < 0) i += period;
  return std::size_t(i < len ? i : period - 1 - i);
}

}  // namespace detail

inline std::vector<double> median_filter(const std::vector<double>& v, std::size_t window) {
  if (window < 3 || window % 2 == 0)
    throw PreconditionError("median_filter: window must be odd and at least 3");
  const long half = long(window / 2);
  std::vector<double> out(v.size()), buf(window);
  for (std::size_t i = 0; i < v.size(); ++i) {
    for (long k = -half; k <= half; ++k) buf[std::size_t(k + half)] = v[detail::reflect_index(long(i) + k, v.size())];
    std::nth_element(buf.begin(), buf.begin() + half, buf.end());
    out[i] = buf[std::size_t(half)];
  }
  return out;
}

// Normalised Gaussian kernel truncated at ceil(3 sigma), reflected edges.
inline std::vector<double> gaussian_filter(const std::vector<double>& v, double sigma) {
  if (!(sigma > 0.0)) throw PreconditionError("gaussian_filter: sigma must be positive");
  const long radius = std::max(1L, long(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(std::size_t(2 * radius + 1));
  double norm = 0.0;
  for (long k = -radius; k <= radius; ++k) {
    const double w = std::exp(-0.5 * double(k * k) / (sigma * sigma));
    kernel[std::size_t(k + radius)] = w;
    norm += w;
  }
  for (auto& w : kernel) w /= norm;
  std::vector<double> out(v.size(), 0.0);
  for (std::size_t i = 0; i < v.size(); ++i) {
    double s = 0.0;
    for (long k = -radius; k <= radius; ++k)
      s += kernel[std::size_t(k + radius)] * v[detail::reflect_index(long(i) + k, v.size())];
    out[i] = s;
  }
  return out;
}

// Median first so isolated spikes (background, text overlays) vanish before
// the Gaussian could spread them into their neighbours.
inline Histogram denoise_histogram(const Histogram& h, double gaussian_sigma, std::size_t median_window) {
  if (!(gaussian_sigma > 0.0)) throw PreconditionError("denoise_histogram: sigma must be positive");
  if (median_window < 3 || median_window % 2 == 0)
    throw PreconditionError("denoise_histogram: median window must be odd and >= 3");
  Histogram out = h;
  out.counts = gaussian_filter(median_filter(h.counts, median_window), gaussian_sigma);
  for (auto& c : out.counts) c = std::max(c, 0.0);
  return out;
}

inline Window find_window(const Histogram& h, double tail_mass) {
  if (!(tail_mass > 0.0 && tail_mass < 0.5))
    throw PreconditionError("find_window: tail_mass must lie in (0, 0.5)");
  const double total = h.total();
  if (!(total > 0.0)) throw DegenerateImageError("find_window: empty histogram");
  std::size_t occupied = 0;
  for (double c : h.counts) occupied += c > 0.0 ? 1 : 0;
  if (occupied < 2) throw DegenerateImageError("find_window: all mass in one bin");

  const double low_mass = tail_mass * total;
  const double high_mass = (1.0 - tail_mass) * total;
  std::size_t first = h.bin_count(), last = h.bin_count();
  double cum = 0.0;
  for (std::size_t i = 0; i < h.bin_count(); ++i) {
    cum += h.counts[i];
    if (first == h.bin_count() && cum >= low_mass) first = i;
    if (cum <= high_mass) last = i;
  }
  if (first == h.bin_count() || last == h.bin_count())
    throw DegenerateImageError("find_window: no bin satisfies the tail bounds");
  Window w{h.edges[first], h.edges[last + 1]};
  if (!(w.low < w.high)) throw DegenerateImageError("find_window: collapsed window");
  return w;
}

inline Window estimate_window(const Image& image, const NormalizationParams& p) {
  if (p.bins < 16) throw PreconditionError("normalize: bin count must be at least 16");
  return find_window(denoise_histogram(compute_histogram(image, p.bins), p.gaussian_sigma, p.median_window),
                     p.tail_mass);
}

// clamp((I - b_low) / (b_high - b_low), 0, 1)
inline Image apply_window(const Image& image, const Window& w) {
  if (!(w.low < w.high)) throw DegenerateImageError("apply_window: empty window");
  Image out(image.width, image.height, 0.0, 0.0, 1.0);
  const double inv = 1.0 / (w.high - w.low);
  for (std::size_t i = 0; i < image.size(); ++i)
    out.pixels[i] = std::clamp((image.pixels[i] - w.low) * inv, 0.0, 1.0);
  return out;
}

inline Image normalize_image(const Image& image, const NormalizationParams& p = {}) {
  return apply_window(image, estimate_window(image, p));
}

}  // namespace cxrmt
