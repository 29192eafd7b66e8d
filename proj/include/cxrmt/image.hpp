#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "cxrmt/error.hpp"

namespace cxrmt {

// Single-channel intensity grid, row-major. range_min/range_max describe the
// representable pixel range of the source (e.g. 0..65535 for 16-bit data).
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;
  double range_min = 0.0;
  double range_max = 1.0;

  Image() = default;
  Image(std::size_t w, std::size_t h, double fill = 0.0, double lo = 0.0, double hi = 1.0)
      : width(w), height(h), pixels(w * h, fill), range_min(lo), range_max(hi) {}

  bool empty() const { return pixels.empty(); }
  std::size_t size() const { return pixels.size(); }
  double& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  double at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }

  friend bool operator==(const Image&, const Image&) = default;
};

// Bilinear resampling with half-pixel centres.
inline Image resize_bilinear(const Image& src, std::size_t width, std::size_t height) {
  if (src.empty()) throw PreconditionError("resize_bilinear: empty image");
  if (width == 0 || height == 0) throw PreconditionError("resize_bilinear: zero target size");
  if (width == src.width && height == src.height) return src;
  Image out(width, height, 0.0, src.range_min, src.range_max);
  const double sx = double(src.width) / double(width);
  const double sy = double(src.height) / double(height);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((double(y) + 0.5) * sy - 0.5, 0.0, double(src.height - 1));
    const auto y0 = std::size_t(fy);
    const std::size_t y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - double(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((double(x) + 0.5) * sx - 0.5, 0.0, double(src.width - 1));
      const auto x0 = std::size_t(fx);
      const std::size_t x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - double(x0);
      const double top = src.at(x0, y0) * (1 - wx) + src.at(x1, y0) * wx;
      const double bot = src.at(x0, y1) * (1 - wx) + src.at(x1, y1) * wx;
      out.at(x, y) = top * (1 - wy) + bot * wy;
    }
  }
  return out;
}

}  // namespace cxrmt
