#pragma once

// Slice stacking and marching-cubes surface extraction for binary label volumes.

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "tsn/image.hpp"

namespace tsn::recon {

/// Binary voxel grid indexed (z, y, x); slice k of the stack sits at depth k.
struct LabelVolume {
  int depth = 0;
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> voxels;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // (x, y, z) voxel size

  LabelVolume() = default;
  LabelVolume(int d, int h, int w, std::array<double, 3> sp = {1.0, 1.0, 1.0});

  std::uint8_t& at(int z, int y, int x) {
    return voxels[(static_cast<std::size_t>(z) * height + y) * width + x];
  }
  std::uint8_t at(int z, int y, int x) const {
    return voxels[(static_cast<std::size_t>(z) * height + y) * width + x];
  }
  /// FNV-1a over dims and voxels.
  std::uint64_t checksum() const;
};

struct TriMesh {
  std::vector<std::array<double, 3>> vertices;  // (x, y, z)
  std::vector<std::array<int, 3>> faces;        // counter-clockwise seen from outside
};

/// Masks are thresholded at 0.5. Throws DimensionError on mixed sizes or an empty list.
LabelVolume stack_slices(const std::vector<Mask>& masks, std::array<double, 3> spacing = {1.0, 1.0, 1.0});

/// Isosurface of the (optionally 3³ box-smoothed) binary field. The volume is
/// padded with background so solids touching the border still close.
TriMesh marching_cubes(const LabelVolume& vol, double iso = 0.5, bool box_filter = true);

/// Connected components over shared vertices.
int count_components(const TriMesh& mesh);

/// V − E + F with E the number of distinct undirected edges.
long euler_characteristic(const TriMesh& mesh);

/// True when every undirected edge is used by exactly two faces.
bool is_closed_manifold(const TriMesh& mesh);

/// Signed volume from the divergence theorem; positive for outward winding.
double enclosed_volume(const TriMesh& mesh);

void write_obj(const std::filesystem::path& path, const TriMesh& mesh);
/// Binary STL.
void write_stl(const std::filesystem::path& path, const TriMesh& mesh);

namespace detail {
extern const int kEdgeTable[256];
extern const int kTriTable[256][16];
}  // namespace detail

}  // namespace tsn::recon
