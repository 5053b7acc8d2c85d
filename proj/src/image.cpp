#include "tsn/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <string>

namespace tsn {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open " + path.string());
  return f;
}

[[noreturn]] void png_fail(png_structp png, png_const_charp msg) {
  (void)png;
  throw IoError(std::string("libpng: ") + msg);
}

void png_warn(png_structp, png_const_charp) {}

std::uint8_t to_byte(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

void write_png_impl(const std::filesystem::path& path, const std::uint8_t* data, int height, int width,
                    int color_type, int channels) {
  auto f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_write_struct(p, i); }
  } guard{&png, &info};
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, data + static_cast<std::size_t>(y) * width * channels);
  }
  png_write_end(png, nullptr);
  if (std::fflush(f.get()) != 0) throw IoError("write failed: " + path.string());
}

}  // namespace

double variance(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double acc = 0.0;
  for (double x : v) acc += (x - mean) * (x - mean);
  return acc / static_cast<double>(v.size());
}

Image read_png_gray(const std::filesystem::path& path) {
  auto f = open_file(path, "rb");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw IoError("not a PNG file: " + path.string());
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  if (!png) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_read_struct(p, i, nullptr); }
  } guard{&png, &info};
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);

  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
      color == PNG_COLOR_TYPE_PALETTE) {
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  }
  png_read_update_info(png, info);
  if (png_get_channels(png, info) != 1) throw IoError("unsupported PNG layout: " + path.string());

  std::vector<std::uint8_t> row(png_get_rowbytes(png, info));
  Image img(height, width);
  for (int y = 0; y < height; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < width; ++x) img(y, x) = row[static_cast<std::size_t>(x)] / 255.0;
  }
  png_read_end(png, nullptr);
  return img;
}

void write_png_gray(const std::filesystem::path& path, std::span<const double> pixels, int height,
                    int width) {
  if (pixels.size() != static_cast<std::size_t>(height) * width) {
    throw DimensionError("write_png_gray: buffer size mismatch");
  }
  std::vector<std::uint8_t> bytes(pixels.size());
  std::transform(pixels.begin(), pixels.end(), bytes.begin(), to_byte);
  write_png_impl(path, bytes.data(), height, width, PNG_COLOR_TYPE_GRAY, 1);
}

Mask read_png_mask(const std::filesystem::path& path) {
  Image img = read_png_gray(path);
  Mask m(img.height(), img.width());
  for (std::size_t i = 0; i < img.size(); ++i) m[i] = img[i] > 0.5 ? 1.0 : 0.0;
  return m;
}

void write_png_rgb(const std::filesystem::path& path, std::span<const std::uint8_t> rgb, int height,
                   int width) {
  if (rgb.size() != static_cast<std::size_t>(height) * width * 3) {
    throw DimensionError("write_png_rgb: buffer size mismatch");
  }
  write_png_impl(path, rgb.data(), height, width, PNG_COLOR_TYPE_RGB, 3);
}

}  // namespace tsn
