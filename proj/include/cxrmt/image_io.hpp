#pragma once

#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <png.h>

#include "cxrmt/image.hpp"

namespace cxrmt {

struct ImageIoError : Error {
  using Error::Error;
};

namespace detail {

inline std::string lower_ext(const std::filesystem::path& p) {
  auto e = p.extension().string();
  for (auto& c : e) c = char(std::tolower(static_cast<unsigned char>(c)));
  return e;
}

// Stored integer for a pixel: affine map of [range_min, range_max] onto [0, maxval].
inline std::vector<std::uint32_t> quantize(const Image& img, std::uint32_t maxval) {
  std::vector<std::uint32_t> out(img.size());
  const double span = img.range_max - img.range_min;
  if (!(span > 0)) throw ImageIoError("write_image: image range is empty");
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double t = std::clamp((img.pixels[i] - img.range_min) / span, 0.0, 1.0);
    out[i] = std::uint32_t(std::lround(t * maxval));
  }
  return out;
}

inline Image read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageIoError("cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(c);
    }
    return t;
  };
  if (token() != "P5") throw ImageIoError(path.string() + ": only binary PGM (P5) is supported");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw ImageIoError(path.string() + ": malformed PGM header");
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535)
    throw ImageIoError(path.string() + ": unsupported PGM geometry");
  Image img(w, h, 0.0, 0.0, double(maxval));
  const std::size_t bytes = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(w * h * bytes);
  if (!in.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size())))
    throw ImageIoError(path.string() + ": truncated PGM data");
  for (std::size_t i = 0; i < w * h; ++i)
    img.pixels[i] = bytes == 2 ? double((raw[2 * i] << 8) | raw[2 * i + 1]) : double(raw[i]);
  return img;
}

inline void write_pgm(const std::filesystem::path& path, const Image& img, int bit_depth) {
  const std::uint32_t maxval = bit_depth == 16 ? 65535 : 255;
  const auto q = quantize(img, maxval);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageIoError("cannot write " + path.string());
  out << "P5\n" << img.width << ' ' << img.height << '\n' << maxval << '\n';
  for (auto v : q) {
    if (bit_depth == 16) out.put(char(v >> 8));
    out.put(char(v & 0xff));
  }
}

struct PngFile {
  FILE* fp = nullptr;
  ~PngFile() {
    if (fp) std::fclose(fp);
  }
};

inline Image read_png(const std::filesystem::path& path) {
  PngFile file{std::fopen(path.string().c_str(), "rb")};
  if (!file.fp) throw ImageIoError("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("libpng initialisation failed");
  }
  std::vector<unsigned char> raw;
  std::vector<png_bytep> rows;
  png_uint_32 w = 0, h = 0;
  int depth = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError(path.string() + ": corrupt PNG");
  }
  png_init_io(png, file.fp);
  png_read_info(png, info);
  w = png_get_image_width(png, info);
  h = png_get_image_height(png, info);
  depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if ((color & PNG_COLOR_MASK_COLOR) || color == PNG_COLOR_TYPE_PALETTE) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError(path.string() + ": only grayscale PNG is supported");
  }
  if (depth < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
    depth = 8;
  }
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  raw.resize(stride * h);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = raw.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Image img(w, h, 0.0, 0.0, depth == 16 ? 65535.0 : 255.0);
  for (png_uint_32 y = 0; y < h; ++y)
    for (png_uint_32 x = 0; x < w; ++x) {
      const unsigned char* p = rows[y] + (depth == 16 ? 2 * x : x);
      img.at(x, y) = depth == 16 ? double((p[0] << 8) | p[1]) : double(p[0]);
    }
  return img;
}

inline void write_png(const std::filesystem::path& path, const Image& img, int bit_depth) {
  const std::uint32_t maxval = bit_depth == 16 ? 65535 : 255;
  const auto q = quantize(img, maxval);
  const std::size_t bytes = bit_depth == 16 ? 2 : 1;
  std::vector<unsigned char> raw(img.size() * bytes);
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (bytes == 2) {
      raw[2 * i] = static_cast<unsigned char>(q[i] >> 8);
      raw[2 * i + 1] = static_cast<unsigned char>(q[i] & 0xff);
    } else {
      raw[i] = static_cast<unsigned char>(q[i]);
    }
  }
  PngFile file{std::fopen(path.string().c_str(), "wb")};
  if (!file.fp) throw ImageIoError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("libpng initialisation failed");
  }
  std::vector<png_bytep> rows(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = raw.data() + y * img.width * bytes;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError(path.string() + ": PNG encoding failed");
  }
  png_init_io(png, file.fp);
  png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height), bit_depth,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

// Grayscale PNG or binary PGM, 8 or 16 bit. The returned image's range is
// [0, maxval] of the stored depth.
inline Image read_image(const std::filesystem::path& path) {
  const auto ext = detail::lower_ext(path);
  if (ext == ".png") return detail::read_png(path);
  if (ext == ".pgm") return detail::read_pgm(path);
  throw ImageIoError(path.string() + ": unsupported image extension");
}

inline void write_image(const std::filesystem::path& path, const Image& img, int bit_depth = 16) {
  if (bit_depth != 8 && bit_depth != 16) throw ImageIoError("write_image: bit depth must be 8 or 16");
  if (img.empty()) throw ImageIoError("write_image: empty image");
  const auto ext = detail::lower_ext(path);
  if (ext == ".png") return detail::write_png(path, img, bit_depth);
  if (ext == ".pgm") return detail::write_pgm(path, img, bit_depth);
  throw ImageIoError(path.string() + ": unsupported image extension");
}

}  // namespace cxrmt
