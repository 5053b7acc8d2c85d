#include "tsn/degrade.hpp"

#include <algorithm>
#include <string>

#include "tsn/kernels.hpp"

namespace tsn::degrade {

std::string_view to_string(DegradationKind kind) {
  switch (kind) {
    case DegradationKind::Blur1x: return "blur1";
    case DegradationKind::Blur2x: return "blur2";
    case DegradationKind::Identity: return "identity";
    case DegradationKind::Artifact: return "artifact";
  }
  return "unknown";
}

std::optional<DegradationKind> parse_kind(std::string_view name) {
  for (auto kind : kAllKinds) {
    if (to_string(kind) == name) return kind;
  }
  return std::nullopt;
}

Image pyramid_down(const Image& img) {
  if (img.height() % 2 != 0 || img.width() % 2 != 0 || img.empty()) {
    throw DimensionError("pyramid_down: dimensions must be even and non-zero, got " +
                         std::to_string(img.height()) + "x" + std::to_string(img.width()));
  }
  Image out(img.height() / 2, img.width() / 2);
  kernels::pyramid_down(img.pixels().data(), img.height(), img.width(), out.pixels().data());
  return out;
}

Image bilinear_up(const Image& img, int target_h, int target_w) {
  if (target_h < img.height() || target_w < img.width()) {
    throw DimensionError("bilinear_up: target " + std::to_string(target_h) + "x" +
                         std::to_string(target_w) + " smaller than source " +
                         std::to_string(img.height()) + "x" + std::to_string(img.width()));
  }
  if (img.empty()) throw DimensionError("bilinear_up: empty source image");
  Image out(target_h, target_w);
  kernels::bilinear_resize(img.pixels().data(), img.height(), img.width(), out.pixels().data(),
                           target_h, target_w);
  for (auto& v : out.pixels()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

Image blur_degrade(const Image& img, int levels) {
  if (levels != 1 && levels != 2) {
    throw std::invalid_argument("blur_degrade: levels must be 1 or 2, got " + std::to_string(levels));
  }
  const int factor = 1 << levels;
  if (img.height() % factor != 0 || img.width() % factor != 0) {
    throw DimensionError("blur_degrade: dimensions must be divisible by " + std::to_string(factor));
  }
  Image small = pyramid_down(img);
  if (levels == 2) small = pyramid_down(small);
  return bilinear_up(small, img.height(), img.width());
}

Image artifact_degrade(const Image& img) {
  Image out = img;
  for (auto& v : out.pixels()) v *= v;
  return out;
}

DegradationKind sample_kind(RandomState& rng) {
  return static_cast<DegradationKind>(rng.next() >> 62);
}

Image apply(const Image& img, DegradationKind kind) {
  switch (kind) {
    case DegradationKind::Blur1x: return blur_degrade(img, 1);
    case DegradationKind::Blur2x: return blur_degrade(img, 2);
    case DegradationKind::Identity: return img;
    case DegradationKind::Artifact: return artifact_degrade(img);
  }
  throw std::invalid_argument("apply: unknown degradation kind");
}

}  // namespace tsn::degrade
