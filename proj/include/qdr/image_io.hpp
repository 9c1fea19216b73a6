#pragma once

// PNG reading/writing through libpng and a minimal histogram plot renderer.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "qdr/tensor.hpp"

namespace qdr {

namespace detail {
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

/// Loads an 8- or 16-bit PNG as a (1, 3, H, W) float tensor in [0,1].
/// Grey and palette images are expanded to RGB, alpha is dropped.
inline Tensor<float> read_png(const std::filesystem::path& path) {
  detail::FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw Error("cannot open image '" + path.string() + "'");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8))
    throw Error("'" + path.string() + "' is not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("failed to decode PNG '" + path.string() + "'");
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (depth == 16) png_set_strip_16(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  std::vector<png_byte> buf(rowbytes * static_cast<std::size_t>(h));
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = buf.data() + rowbytes * y;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor<float> img(Shape{1, 3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img(0, c, y, x) = rows[static_cast<std::size_t>(y)][x * 3 + c] / 255.0f;
  return img;
}

/// Writes an interleaved 8-bit RGB buffer.
inline void write_png_rgb(const std::filesystem::path& path, int w, int h,
                          const std::vector<unsigned char>& rgb) {
  detail::FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw Error("cannot write image '" + path.string() + "'");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("failed to encode PNG '" + path.string() + "'");
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < h; ++y)
    png_write_row(png, const_cast<png_bytep>(rgb.data() + static_cast<std::size_t>(y) * w * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Writes sample `n` of a 3-channel tensor, clamping to [0,1].
template <typename T>
void write_png(const std::filesystem::path& path, const Tensor<T>& img, int n = 0) {
  const Shape s = img.shape();
  if (s.c != 3) throw Error("write_png expects 3 channels, got " + s.str());
  std::vector<unsigned char> rgb(s.plane() * 3);
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(static_cast<double>(img(n, c, y, x)), 0.0, 1.0);
        rgb[(static_cast<std::size_t>(y) * s.w + x) * 3 + c] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
  write_png_rgb(path, s.w, s.h, rgb);
}

/// Two overlaid histograms (teacher blue, student orange, overlap darker).
inline void plot_histograms(const std::filesystem::path& path, const std::vector<long>& student,
                            const std::vector<long>& teacher, int bar_width = 6, int height = 200) {
  if (student.size() != teacher.size() || student.empty())
    throw Error("plot_histograms: histograms must be non-empty and equally sized");
  const int bins = static_cast<int>(student.size());
  const int w = bins * bar_width, h = height;
  long peak = 1;
  for (std::size_t i = 0; i < student.size(); ++i) peak = std::max({peak, student[i], teacher[i]});
  std::vector<unsigned char> rgb(static_cast<std::size_t>(w) * h * 3, 255);
  for (int b = 0; b < bins; ++b) {
    const int ht = static_cast<int>(std::lround(double(teacher[b]) / peak * (h - 1)));
    const int hs = static_cast<int>(std::lround(double(student[b]) / peak * (h - 1)));
    for (int x = b * bar_width; x < (b + 1) * bar_width - 1; ++x)
      for (int y = 0; y < h; ++y) {
        const int level = h - 1 - y;
        const bool in_t = level < ht, in_s = level < hs;
        unsigned char* p = &rgb[(static_cast<std::size_t>(y) * w + x) * 3];
        if (in_t && in_s) {
          p[0] = 90; p[1] = 60; p[2] = 110;
        } else if (in_t) {
          p[0] = 70; p[1] = 130; p[2] = 220;
        } else if (in_s) {
          p[0] = 240; p[1] = 150; p[2] = 50;
        }
      }
  }
  write_png_rgb(path, w, h, rgb);
}

}  // namespace qdr
