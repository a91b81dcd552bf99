#pragma once

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "spansr/tensor.hpp"

namespace spansr {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

// Loads an 8-bit RGB / RGBA / grayscale PNG as a (1,3,h,w) tensor in [0,1].
// Grayscale is replicated to 3 channels; alpha is dropped. Palette and
// 16-bit files are rejected.
template <typename T = float>
Tensor4<T> load_png(const std::string& path) {
  detail::FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw ImageIoError("load_png: cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("load_png: libpng init failed for " + path);
  }
  std::vector<png_bytep> rows;
  std::vector<png_byte> pixels;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("load_png: decode error in " + path);
  }
  png_init_io(png, file.get());
  png_read_info(png, info);

  const png_byte depth = png_get_bit_depth(png, info);
  const png_byte color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("load_png: palette PNG unsupported: " + path);
  }
  if (depth != 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("load_png: only 8-bit PNG supported (got " + std::to_string(depth) +
                       "-bit): " + path);
  }
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_set_gray_to_rgb(png);
  }
  png_read_update_info(png, info);

  const index_t w = static_cast<index_t>(png_get_image_width(png, info));
  const index_t h = static_cast<index_t>(png_get_image_height(png, info));
  pixels.resize(static_cast<std::size_t>(h * w * 3));
  rows.resize(static_cast<std::size_t>(h));
  for (index_t y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = pixels.data() + y * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor4<T> out(Shape4{1, 3, h, w});
  for (index_t y = 0; y < h; ++y)
    for (index_t x = 0; x < w; ++x)
      for (index_t c = 0; c < 3; ++c) {
        out.at(0, c, y, x) =
            static_cast<T>(pixels[static_cast<std::size_t>((y * w + x) * 3 + c)]) / T(255);
      }
  return out;
}

// Clamps to [0,1], rounds to the nearest 8-bit level and writes an RGB PNG.
template <typename T>
void save_png(const Tensor4<T>& img, const std::string& path) {
  if (img.n() != 1 || (img.c() != 3 && img.c() != 1)) {
    throw ImageIoError("save_png: expected (1,3,h,w) or (1,1,h,w), got " + img.shape().str());
  }
  detail::FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw ImageIoError("save_png: cannot open " + path + " for writing");

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("save_png: libpng init failed for " + path);
  }
  const index_t h = img.h(), w = img.w();
  std::vector<png_byte> pixels(static_cast<std::size_t>(h * w * 3));
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (index_t y = 0; y < h; ++y) {
    rows[static_cast<std::size_t>(y)] = pixels.data() + y * w * 3;
    for (index_t x = 0; x < w; ++x)
      for (index_t c = 0; c < 3; ++c) {
        const T v = img.at(0, img.c() == 3 ? c : 0, y, x);
        const double clamped = std::min(1.0, std::max(0.0, static_cast<double>(v)));
        pixels[static_cast<std::size_t>((y * w + x) * 3 + c)] =
            static_cast<png_byte>(std::lround(clamped * 255.0));
      }
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("save_png: encode error for " + path);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace spansr
