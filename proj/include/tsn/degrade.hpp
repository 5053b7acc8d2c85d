#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string_view>

#include "tsn/image.hpp"
#include "tsn/rng.hpp"

namespace tsn::degrade {

/// The four degradation operators, drawn uniformly during training.
enum class DegradationKind : std::uint8_t { Blur1x = 0, Blur2x = 1, Identity = 2, Artifact = 3 };

inline constexpr std::array<DegradationKind, 4> kAllKinds{
    DegradationKind::Blur1x, DegradationKind::Blur2x, DegradationKind::Identity,
    DegradationKind::Artifact};

/// Selection probability of each kind.
inline constexpr std::array<double, 4> kKindProbabilities{0.25, 0.25, 0.25, 0.25};

std::string_view to_string(DegradationKind kind);
/// Accepts the CLI spellings blur1 / blur2 / identity / artifact.
std::optional<DegradationKind> parse_kind(std::string_view name);

/// Half-size Gaussian pyramid level (5×5 binomial kernel, reflect-101 borders).
Image pyramid_down(const Image& img);

/// Corner-aligned bilinear upsampling to (target_h, target_w).
Image bilinear_up(const Image& img, int target_h, int target_w);

/// `levels` pyramid reductions followed by bilinear upsampling back to the input size.
Image blur_degrade(const Image& img, int levels);

/// Pixel-wise square; raises contrast between bright and mid-gray structures.
Image artifact_degrade(const Image& img);

/// Draws a kind with probability 1/4 each, from the top two bits of one engine output.
DegradationKind sample_kind(RandomState& rng);

Image apply(const Image& img, DegradationKind kind);

}  // namespace tsn::degrade
