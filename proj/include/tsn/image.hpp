#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tsn/error.hpp"

namespace tsn {

/// Row-major single-channel 2D grid of doubles. The tag keeps images and
/// masks from being mixed up at call sites; convert explicitly with plane_cast.
template <class Tag>
class Plane {
 public:
  Plane() = default;

  Plane(int height, int width, double fill = 0.0)
      : height_(height), width_(width), pixels_(checked_size(height, width), fill) {}

  Plane(int height, int width, std::vector<double> pixels)
      : height_(height), width_(width), pixels_(std::move(pixels)) {
    if (pixels_.size() != checked_size(height, width)) {
      throw DimensionError("pixel buffer does not match plane dimensions");
    }
  }

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return pixels_.size(); }
  bool empty() const { return pixels_.empty(); }

  double& operator()(int y, int x) { return pixels_[static_cast<std::size_t>(y) * width_ + x]; }
  double operator()(int y, int x) const { return pixels_[static_cast<std::size_t>(y) * width_ + x]; }

  double& operator[](std::size_t i) { return pixels_[i]; }
  double operator[](std::size_t i) const { return pixels_[i]; }

  std::span<double> pixels() { return pixels_; }
  std::span<const double> pixels() const { return pixels_; }
  const std::vector<double>& vec() const { return pixels_; }

  bool same_dims(const auto& other) const {
    return height_ == other.height() && width_ == other.width();
  }

  bool operator==(const Plane&) const = default;

 private:
  static std::size_t checked_size(int h, int w) {
    if (h < 0 || w < 0) throw DimensionError("negative plane dimension");
    return static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<double> pixels_;
};

struct ImageTag {};
struct MaskTag {};

/// Single-channel intensity image with values in [0,1].
using Image = Plane<ImageTag>;
/// Binary ground truth or [0,1] probability map.
using Mask = Plane<MaskTag>;

template <class To, class From>
To plane_cast(const From& p) {
  return To(p.height(), p.width(), std::vector<double>(p.pixels().begin(), p.pixels().end()));
}

void require_same_dims(const auto& a, const auto& b, const char* what) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw DimensionError(std::string(what) + ": dimension mismatch");
  }
}

/// Pixel variance (population).
double variance(std::span<const double> v);

// 8-bit grayscale PNG I/O, mapped linearly to [0,1].
Image read_png_gray(const std::filesystem::path& path);
void write_png_gray(const std::filesystem::path& path, std::span<const double> pixels, int height,
                    int width);

template <class Tag>
void write_png(const std::filesystem::path& path, const Plane<Tag>& p) {
  write_png_gray(path, p.pixels(), p.height(), p.width());
}

/// Masks are stored as 0/255; anything above mid-gray reads back as 1.
Mask read_png_mask(const std::filesystem::path& path);

/// Interleaved 8-bit RGB.
void write_png_rgb(const std::filesystem::path& path, std::span<const std::uint8_t> rgb, int height,
                   int width);

}  // namespace tsn
