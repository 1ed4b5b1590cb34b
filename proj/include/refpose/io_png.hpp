/**
 * \file io_png.hpp
 * \brief PNG readers and writers: 16-bit depth maps, 8-bit grayscale masks
 *        and 8-bit RGB images.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <png.h>

#include "refpose/types.hpp"

namespace refpose::io {

namespace detail {

struct PngReader {
  FILE* f = nullptr;
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReader() {
    if (png != nullptr) png_destroy_read_struct(&png, &info, nullptr);
    if (f != nullptr) std::fclose(f);
  }
};

struct PngWriter {
  FILE* f = nullptr;
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriter() {
    if (png != nullptr) png_destroy_write_struct(&png, &info);
    if (f != nullptr) std::fclose(f);
  }
};

/// Opens \p path and reads the IHDR; throws FormatError on any failure.
inline void open_png(PngReader& r, const std::string& path) {
  r.f = std::fopen(path.c_str(), "rb");
  if (r.f == nullptr) throw FormatError("png: cannot open " + path);
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, r.f) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw FormatError("png: not a PNG file: " + path);
  r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (r.png == nullptr) throw FormatError("png: reader allocation failed");
  r.info = png_create_info_struct(r.png);
  if (r.info == nullptr) throw FormatError("png: info allocation failed");
  if (setjmp(png_jmpbuf(r.png)) != 0)
    throw FormatError("png: corrupt or truncated file: " + path);
  png_init_io(r.png, r.f);
  png_set_sig_bytes(r.png, 8);
  png_read_info(r.png, r.info);
}

template <typename T>
inline void read_rows(PngReader& r, const std::string& path, Image<T>& img,
                      int channels) {
  const int w = static_cast<int>(png_get_image_width(r.png, r.info));
  const int h = static_cast<int>(png_get_image_height(r.png, r.info));
  img = Image<T>(w * channels, h);
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y)
    rows[static_cast<std::size_t>(y)] = reinterpret_cast<png_bytep>(&img.at(0, y));
  if (setjmp(png_jmpbuf(r.png)) != 0)
    throw FormatError("png: corrupt or truncated pixel data: " + path);
  png_read_image(r.png, rows.data());
  png_read_end(r.png, nullptr);
}

inline void open_png_write(PngWriter& w, const std::string& path, int width,
                           int height, int bit_depth, int color_type) {
  w.f = std::fopen(path.c_str(), "wb");
  if (w.f == nullptr) throw FormatError("png: cannot open for write " + path);
  w.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (w.png == nullptr) throw FormatError("png: writer allocation failed");
  w.info = png_create_info_struct(w.png);
  if (w.info == nullptr) throw FormatError("png: info allocation failed");
  if (setjmp(png_jmpbuf(w.png)) != 0)
    throw FormatError("png: write failed: " + path);
  png_init_io(w.png, w.f);
  png_set_IHDR(w.png, w.info, static_cast<png_uint_32>(width),
               static_cast<png_uint_32>(height), bit_depth, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(w.png, w.info);
}

}  // namespace detail

/// \brief Reads a 16-bit single-channel PNG; any other layout is a FormatError.
inline Image<std::uint16_t> load_png_gray16(const std::string& path) {
  detail::PngReader r;
  detail::open_png(r, path);
  if (png_get_bit_depth(r.png, r.info) != 16 ||
      png_get_color_type(r.png, r.info) != PNG_COLOR_TYPE_GRAY)
    throw FormatError("png: expected 16-bit single-channel grayscale: " + path);
  png_set_swap(r.png);
  png_set_interlace_handling(r.png);
  png_read_update_info(r.png, r.info);
  Image<std::uint16_t> img;
  detail::read_rows(r, path, img, 1);
  return img;
}

/// \brief Writes a 16-bit single-channel PNG.
inline void save_png_gray16(const std::string& path, const Image<std::uint16_t>& img) {
  if (img.empty()) throw InvalidInputError("save_png_gray16: empty image");
  detail::PngWriter w;
  detail::open_png_write(w, path, img.width(), img.height(), 16,
                         PNG_COLOR_TYPE_GRAY);
  png_set_swap(w.png);
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height()));
  for (int y = 0; y < img.height(); ++y)
    rows[static_cast<std::size_t>(y)] = reinterpret_cast<png_bytep>(
        const_cast<std::uint16_t*>(&img.at(0, y)));
  if (setjmp(png_jmpbuf(w.png)) != 0)
    throw FormatError("png: write failed: " + path);
  png_write_image(w.png, rows.data());
  png_write_end(w.png, nullptr);
}

/// \brief Reads an 8-bit single-channel PNG (masks).
inline Image<std::uint8_t> load_png_gray8(const std::string& path) {
  detail::PngReader r;
  detail::open_png(r, path);
  if (png_get_bit_depth(r.png, r.info) != 8 ||
      png_get_color_type(r.png, r.info) != PNG_COLOR_TYPE_GRAY)
    throw FormatError("png: expected 8-bit single-channel grayscale: " + path);
  png_set_interlace_handling(r.png);
  png_read_update_info(r.png, r.info);
  Image<std::uint8_t> img;
  detail::read_rows(r, path, img, 1);
  return img;
}

/// \brief Writes an 8-bit single-channel PNG.
inline void save_png_gray8(const std::string& path, const Image<std::uint8_t>& img) {
  if (img.empty()) throw InvalidInputError("save_png_gray8: empty image");
  detail::PngWriter w;
  detail::open_png_write(w, path, img.width(), img.height(), 8, PNG_COLOR_TYPE_GRAY);
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height()));
  for (int y = 0; y < img.height(); ++y)
    rows[static_cast<std::size_t>(y)] =
        reinterpret_cast<png_bytep>(const_cast<std::uint8_t*>(&img.at(0, y)));
  if (setjmp(png_jmpbuf(w.png)) != 0)
    throw FormatError("png: write failed: " + path);
  png_write_image(w.png, rows.data());
  png_write_end(w.png, nullptr);
}

/// \brief Planar 8-bit RGB triple.
struct Rgb8 {
  Image<std::uint8_t> r, g, b;
};

/// \brief Reads an 8-bit RGB (or RGBA, alpha dropped) PNG into planes.
inline Rgb8 load_png_rgb8(const std::string& path) {
  detail::PngReader r;
  detail::open_png(r, path);
  const auto color = png_get_color_type(r.png, r.info);
  if (png_get_bit_depth(r.png, r.info) != 8 ||
      (color != PNG_COLOR_TYPE_RGB && color != PNG_COLOR_TYPE_RGB_ALPHA))
    throw FormatError("png: expected 8-bit RGB or RGBA: " + path);
  if (color == PNG_COLOR_TYPE_RGB_ALPHA) png_set_strip_alpha(r.png);
  png_set_interlace_handling(r.png);
  png_read_update_info(r.png, r.info);
  Image<std::uint8_t> inter;
  detail::read_rows(r, path, inter, 3);

  const int w = inter.width() / 3, h = inter.height();
  Rgb8 out{Image<std::uint8_t>(w, h), Image<std::uint8_t>(w, h),
           Image<std::uint8_t>(w, h)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      out.r.at(x, y) = inter.at(3 * x, y);
      out.g.at(x, y) = inter.at(3 * x + 1, y);
      out.b.at(x, y) = inter.at(3 * x + 2, y);
    }
  return out;
}

/// \brief Writes planar 8-bit RGB planes as one RGB PNG.
inline void save_png_rgb8(const std::string& path, const Rgb8& rgb) {
  if (rgb.r.empty()) throw InvalidInputError("save_png_rgb8: empty image");
  require_same_size(rgb.r, rgb.g, "save_png_rgb8");
  require_same_size(rgb.r, rgb.b, "save_png_rgb8");
  const int w = rgb.r.width(), h = rgb.r.height();
  Image<std::uint8_t> inter(3 * w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      inter.at(3 * x, y) = rgb.r.at(x, y);
      inter.at(3 * x + 1, y) = rgb.g.at(x, y);
      inter.at(3 * x + 2, y) = rgb.b.at(x, y);
    }
  detail::PngWriter wr;
  detail::open_png_write(wr, path, w, h, 8, PNG_COLOR_TYPE_RGB);
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y)
    rows[static_cast<std::size_t>(y)] = reinterpret_cast<png_bytep>(&inter.at(0, y));
  if (setjmp(png_jmpbuf(wr.png)) != 0)
    throw FormatError("png: write failed: " + path);
  png_write_image(wr.png, rows.data());
  png_write_end(wr.png, nullptr);
}

/// \brief Rec.601 luma in [0, 1] from 8-bit RGB planes.
inline Image<double> rgb_to_gray(const Rgb8& rgb) {
  require_same_size(rgb.r, rgb.g, "rgb_to_gray");
  require_same_size(rgb.r, rgb.b, "rgb_to_gray");
  Image<double> out(rgb.r.width(), rgb.r.height());
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x)
      out.at(x, y) = (0.299 * rgb.r.at(x, y) + 0.587 * rgb.g.at(x, y) +
                      0.114 * rgb.b.at(x, y)) /
                     255.0;
  return out;
}

/// \brief Depth map plus the tally of pixels clamped into the metric range.
struct DepthLoad {
  DepthMap depth;
  long long clamped = 0;
};

/**
 * \brief Loads a 16-bit depth PNG as meters = stored / scale.
 *
 * Stored zeros stay invalid. Valid readings are clamped into
 * [depth_min, depth_max] and each clamp is tallied.
 */
inline DepthLoad load_depth_png(const std::string& path, double scale,
                                double depth_min = kDepthMin,
                                double depth_max = kDepthMax) {
  if (!(scale > 0.0)) throw InvalidInputError("load_depth_png: scale must be positive");
  if (!(depth_min > 0.0) || !(depth_max > depth_min))
    throw InvalidInputError("load_depth_png: bad depth range");
  const auto raw = load_png_gray16(path);
  DepthLoad out;
  out.depth = DepthMap(raw.width(), raw.height(), 0.0);
  for (int y = 0; y < raw.height(); ++y)
    for (int x = 0; x < raw.width(); ++x) {
      const std::uint16_t s = raw.at(x, y);
      if (s == 0) continue;
      double m = static_cast<double>(s) / scale;
      if (m < depth_min) {
        m = depth_min;
        ++out.clamped;
      } else if (m > depth_max) {
        m = depth_max;
        ++out.clamped;
      }
      out.depth.at(x, y) = m;
    }
  return out;
}

/// \brief Writes depth as a 16-bit PNG with stored = round(meters * scale);
///        invalid pixels store 0, and values are clamped to the u16 range.
inline void save_depth_png(const std::string& path, const DepthMap& depth,
                           double scale) {
  if (!(scale > 0.0)) throw InvalidInputError("save_depth_png: scale must be positive");
  Image<std::uint16_t> raw(depth.width(), depth.height(), 0);
  for (int y = 0; y < depth.height(); ++y)
    for (int x = 0; x < depth.width(); ++x) {
      if (!depth.valid(x, y)) continue;
      const double s = std::round(depth.at(x, y) * scale);
      raw.at(x, y) = static_cast<std::uint16_t>(std::clamp(s, 1.0, 65535.0));
    }
  save_png_gray16(path, raw);
}

}  // namespace refpose::io
