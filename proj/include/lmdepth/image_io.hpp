#pragma once

// PNG codecs (8-bit RGB, 16-bit grayscale depth), the depth scale sidecar,
// and false-color rendering.

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "lmdepth/tensor.hpp"

namespace lmdepth {

/// Interleaved pixels, 8 or 16 bits per sample.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  int bit_depth = 8;
  std::vector<std::uint16_t> pixels;

  std::uint16_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] inline void png_error_fn(png_structp png, png_const_charp msg) {
  auto* err = static_cast<std::string*>(png_get_error_ptr(png));
  if (err) *err = msg;
  png_longjmp(png, 1);
}
inline void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace detail

/// Decodes any PNG into 8-bit RGB or 16-bit/8-bit gray, depending on `want_gray`.
inline Image read_png(const std::filesystem::path& path, bool want_gray) {
  detail::FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw IoError("cannot open image " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw FormatError(path.string() + " is not a PNG file");
  }
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn, detail::png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialization failed");
  }
  Image img;
  std::vector<png_bytep> rows;
  std::vector<std::uint8_t> raw;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("decoding " + path.string() + ": " + err);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  const bool gray_src = (color & PNG_COLOR_MASK_COLOR) == 0;
  if (want_gray) {
    if (!gray_src) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  } else {
    png_set_strip_16(png);
    if (gray_src) png_set_gray_to_rgb(png);
  }
  png_read_update_info(png, info);
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.channels = png_get_channels(png, info);
  img.bit_depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  raw.resize(rowbytes * img.height);
  rows.resize(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = raw.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  const std::size_t n = img.width * img.height * img.channels;
  img.pixels.resize(n);
  if (img.bit_depth == 16) {
    for (std::size_t i = 0; i < n; ++i)
      img.pixels[i] = static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]);  // PNG is big-endian
  } else {
    for (std::size_t i = 0; i < n; ++i) img.pixels[i] = raw[i];
  }
  return img;
}

inline void write_png(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw ParameterError("write_png supports gray or RGB images");
  if (img.bit_depth != 8 && img.bit_depth != 16) throw ParameterError("write_png supports 8 or 16 bits");
  if (img.pixels.size() != img.width * img.height * img.channels || img.width == 0 || img.height == 0) {
    throw ShapeError("write_png: pixel buffer does not match " + std::to_string(img.width) + "x" +
                     std::to_string(img.height));
  }
  detail::FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw IoError("cannot write image " + path.string());
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn, detail::png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialization failed");
  }
  const std::size_t bps = img.bit_depth / 8;
  const std::size_t rowbytes = img.width * img.channels * bps;
  std::vector<std::uint8_t> raw(rowbytes * img.height);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    if (bps == 2) {
      raw[2 * i] = static_cast<std::uint8_t>(img.pixels[i] >> 8);
      raw[2 * i + 1] = static_cast<std::uint8_t>(img.pixels[i] & 0xff);
    } else {
      raw[i] = static_cast<std::uint8_t>(std::min<std::uint16_t>(img.pixels[i], 255));
    }
  }
  std::vector<png_bytep> rows(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = raw.data() + y * rowbytes;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("encoding " + path.string() + ": " + err);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), img.bit_depth,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// 8-bit RGB image -> 3 x H x W in [0, 1].
template <class T>
Tensor<T> rgb_to_tensor(const Image& img) {
  if (img.channels != 3) throw FormatError("expected an RGB image");
  const double maxv = img.bit_depth == 16 ? 65535.0 : 255.0;
  Tensor<T> t(Shape{3, img.height, img.width});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) t.at(c, y, x) = static_cast<T>(img.at(y, x, c) / maxv);
  return t;
}

template <class T>
Image tensor_to_rgb(const Tensor<T>& t) {
  if (t.rank() != 3 || t.dim(0) != 3) throw ShapeError("tensor_to_rgb expects 3 x H x W, got " + shape_str(t.shape()));
  Image img{t.dim(2), t.dim(1), 3, 8, {}};
  img.pixels.resize(img.width * img.height * 3);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) {
        const double v = std::clamp(static_cast<double>(t.at(c, y, x)), 0.0, 1.0);
        img.pixels[(y * img.width + x) * 3 + c] = static_cast<std::uint16_t>(std::lround(v * 255.0));
      }
  return img;
}

inline std::filesystem::path scale_sidecar(const std::filesystem::path& depth_path) {
  return std::filesystem::path(depth_path.string() + ".scale");
}

/// Parses "depth_scale <meters per unit>".
inline double parse_scale_line(const std::string& line, const std::string& where) {
  std::istringstream is(line);
  std::string key;
  double scale = 0.0;
  if (!(is >> key >> scale) || key != "depth_scale") {
    throw FormatError(where + ": expected 'depth_scale <meters per unit>' header, got '" + line + "'");
  }
  if (!(scale > 0.0) || !std::isfinite(scale)) throw FormatError(where + ": depth scale must be positive");
  return scale;
}

/// 16-bit grayscale, round(depth / scale) clamped to [0, 65535], plus a
/// one-line scale sidecar next to the image.
template <class T>
void write_depth(const Tensor<T>& depth, const std::filesystem::path& path, double scale) {
  if (!(scale > 0.0)) throw ParameterError("write_depth: scale must be > 0");
  if (depth.rank() != 2) throw ShapeError("write_depth expects H x W, got " + shape_str(depth.shape()));
  Image img{depth.dim(1), depth.dim(0), 1, 16, std::vector<std::uint16_t>(depth.size())};
  for (std::size_t i = 0; i < depth.size(); ++i) {
    const double u = std::round(static_cast<double>(depth[i]) / scale);
    img.pixels[i] = static_cast<std::uint16_t>(std::clamp(std::isfinite(u) ? u : 0.0, 0.0, 65535.0));
  }
  write_png(path, img);
  std::ofstream side(scale_sidecar(path), std::ios::trunc);
  if (!side) throw IoError("cannot write " + scale_sidecar(path).string());
  char buf[64];
  std::snprintf(buf, sizeof buf, "depth_scale %.17g\n", scale);
  side << buf;
}

/// Raw 16-bit depth units of a grayscale PNG as an H x W tensor.
template <class T>
Tensor<T> read_depth_units(const std::filesystem::path& path) {
  const Image img = read_png(path, true);
  if (img.channels != 1) throw FormatError(path.string() + ": depth must be single-channel");
  Tensor<T> t(Shape{img.height, img.width});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(img.pixels[i]);
  return t;
}

/// Depth in meters; the scale comes from the sidecar.
template <class T>
Tensor<T> read_depth(const std::filesystem::path& path) {
  std::ifstream side(scale_sidecar(path));
  if (!side) throw FormatError(path.string() + ": missing depth scale sidecar " + scale_sidecar(path).string());
  std::string line;
  std::getline(side, line);
  const double scale = parse_scale_line(line, scale_sidecar(path).string());
  Tensor<T> t = read_depth_units<T>(path);
  for (auto& v : t.storage()) v = static_cast<T>(static_cast<double>(v) * scale);
  return t;
}

/// Ramp stops from near (warm) to far (cool).
inline constexpr std::array<std::array<std::uint8_t, 3>, 7> kDepthRamp{{
    {165, 0, 38},
    {244, 109, 67},
    {253, 174, 97},
    {255, 255, 191},
    {171, 217, 233},
    {69, 117, 180},
    {49, 54, 149},
}};

inline std::array<std::uint8_t, 3> ramp_color(double t) {
  t = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0);
  const double pos = t * static_cast<double>(kDepthRamp.size() - 1);
  const std::size_t i = std::min(static_cast<std::size_t>(pos), kDepthRamp.size() - 2);
  const double f = pos - static_cast<double>(i);
  std::array<std::uint8_t, 3> c{};
  for (std::size_t k = 0; k < 3; ++k) {
    const double v = (1.0 - f) * kDepthRamp[i][k] + f * kDepthRamp[i + 1][k];
    c[k] = static_cast<std::uint8_t>(std::lround(v));
  }
  return c;
}

/// Linear map of [d_min, d_max] onto the ramp, out-of-range values clamped.
template <class T>
Image colorize(const Tensor<T>& depth, double d_min, double d_max) {
  if (depth.rank() != 2) throw ShapeError("colorize expects H x W, got " + shape_str(depth.shape()));
  if (!(d_max > d_min)) throw ParameterError("colorize: need d_min < d_max");
  Image img{depth.dim(1), depth.dim(0), 3, 8, std::vector<std::uint16_t>(depth.size() * 3)};
  for (std::size_t i = 0; i < depth.size(); ++i) {
    const auto c = ramp_color((static_cast<double>(depth[i]) - d_min) / (d_max - d_min));
    for (std::size_t k = 0; k < 3; ++k) img.pixels[3 * i + k] = c[k];
  }
  return img;
}

}  // namespace lmdepth
