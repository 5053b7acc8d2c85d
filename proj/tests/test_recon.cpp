#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>

#include "doctest.h"
#include "support.hpp"
#include "tsn/error.hpp"
#include "tsn/recon.hpp"

using namespace tsn;
using namespace tsn::recon;

namespace {

std::vector<Mask> sphere_masks(int n, double r) {
  std::vector<Mask> out;
  const double c = (n - 1) / 2.0;
  for (int z = 0; z < n; ++z) {
    Mask m(n, n);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const double d2 = (x - c) * (x - c) + (y - c) * (y - c) + (z - c) * (z - c);
        m(y, x) = d2 <= r * r ? 1.0 : 0.0;
      }
    out.push_back(m);
  }
  return out;
}

LabelVolume two_blocks() {
  LabelVolume v(12, 12, 20);
  for (int z = 2; z < 8; ++z)
    for (int y = 2; y < 8; ++y) {
      for (int x = 2; x < 7; ++x) v.at(z, y, x) = 1;
      for (int x = 12; x < 18; ++x) v.at(z, y, x) = 1;
    }
  return v;
}

double area2(const TriMesh& m, const std::array<int, 3>& f) {
  const auto& a = m.vertices[static_cast<std::size_t>(f[0])];
  const auto& b = m.vertices[static_cast<std::size_t>(f[1])];
  const auto& c = m.vertices[static_cast<std::size_t>(f[2])];
  const double ux = b[0] - a[0], uy = b[1] - a[1], uz = b[2] - a[2];
  const double vx = c[0] - a[0], vy = c[1] - a[1], vz = c[2] - a[2];
  const double cx = uy * vz - uz * vy, cy = uz * vx - ux * vz, cz = ux * vy - uy * vx;
  return std::sqrt(cx * cx + cy * cy + cz * cz);
}

}  // namespace

TEST_CASE("stacking slices") {
  RandomState rng(1);
  const auto one = stack_slices({test::random_binary(8, 6, rng)});
  CHECK(one.depth == 1);
  CHECK(one.height == 8);
  CHECK(one.width == 6);

  const auto a = test::random_binary(8, 8, rng), b = test::random_binary(8, 8, rng);
  const auto ab = stack_slices({a, b}), ba = stack_slices({b, a});
  CHECK(ab.checksum() != ba.checksum());
  CHECK(ab.checksum() == stack_slices({a, b}).checksum());
  CHECK(ab.at(1, 3, 4) == (b(3, 4) > 0.5));

  Mask soft(2, 2, std::vector<double>{0.2, 0.5, 0.7, 0.49});
  const auto s = stack_slices({soft});
  CHECK(s.voxels == std::vector<std::uint8_t>{0, 1, 1, 0});

  CHECK_THROWS_AS(stack_slices({}), DimensionError);
  CHECK_THROWS_AS(stack_slices({Mask(4, 4), Mask(4, 5)}), DimensionError);
}

TEST_CASE("empty volumes give empty meshes") {
  const auto v = stack_slices({Mask(8, 8), Mask(8, 8)});
  const auto m = marching_cubes(v);
  CHECK(m.vertices.empty());
  CHECK(m.faces.empty());
  CHECK(enclosed_volume(m) == 0.0);
  CHECK(count_components(m) == 0);
}

TEST_CASE("a voxelized sphere becomes a closed genus-zero surface of the right volume") {
  const auto vol = stack_slices(sphere_masks(32, 10.0));
  for (bool box : {true, false}) {
    INFO("box filter " << box);
    const auto m = marching_cubes(vol, 0.5, box);
    REQUIRE_FALSE(m.faces.empty());
    CHECK(is_closed_manifold(m));
    CHECK(euler_characteristic(m) == 2);
    CHECK(count_components(m) == 1);
    const double v = enclosed_volume(m);
    const double expected = 4.0 / 3.0 * std::numbers::pi * 1000.0;
    CHECK(v > 0.0);
    CHECK(std::abs(v - expected) / expected < 0.15);
  }
}

TEST_CASE("separate solids stay separate components") {
  const auto m = marching_cubes(two_blocks());
  CHECK(count_components(m) == 2);
  CHECK(is_closed_manifold(m));
  CHECK(euler_characteristic(m) == 4);
  CHECK(enclosed_volume(m) > 0.0);
}

TEST_CASE("solids touching the border still close") {
  LabelVolume v(3, 4, 4);
  for (auto& x : v.voxels) x = 1;
  const auto m = marching_cubes(v, 0.5, false);
  CHECK(is_closed_manifold(m));
  CHECK(euler_characteristic(m) == 2);
  CHECK(enclosed_volume(m) > 0.0);
}

TEST_CASE("spacing scales the mesh coordinates") {
  const auto masks = sphere_masks(16, 5.0);
  const auto m1 = marching_cubes(stack_slices(masks));
  const auto m2 = marching_cubes(stack_slices(masks, {2.0, 2.0, 2.0}));
  REQUIRE(m1.vertices.size() == m2.vertices.size());
  CHECK(m1.faces == m2.faces);
  for (std::size_t i = 0; i < m1.vertices.size(); ++i)
    for (int k = 0; k < 3; ++k) CHECK(m2.vertices[i][static_cast<std::size_t>(k)] == doctest::Approx(2 * m1.vertices[i][static_cast<std::size_t>(k)]));
  CHECK(enclosed_volume(m2) == doctest::Approx(8 * enclosed_volume(m1)));

  const auto m3 = marching_cubes(stack_slices(masks, {1.0, 1.0, 3.0}));
  CHECK(enclosed_volume(m3) == doctest::Approx(3 * enclosed_volume(m1)));
}

TEST_CASE("meshes are watertight without degenerate faces") {
  RandomState rng(4);
  for (int t = 0; t < 10; ++t) {
    std::vector<Mask> masks;
    for (int z = 0; z < 6; ++z) masks.push_back(test::random_binary(10, 10, rng, 0.4));
    for (bool box : {true, false}) {
      const auto m = marching_cubes(stack_slices(masks), 0.5, box);
      CHECK(is_closed_manifold(m));
      for (const auto& f : m.faces) {
        REQUIRE(f[0] != f[1]);
        REQUIRE(f[1] != f[2]);
        REQUIRE(f[0] != f[2]);
        REQUIRE(area2(m, f) > 1e-12);
      }
    }
  }
}

TEST_CASE("euler characteristic of a hand-built tetrahedron") {
  TriMesh tet;
  tet.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  tet.faces = {{0, 2, 1}, {0, 1, 3}, {0, 3, 2}, {1, 2, 3}};
  CHECK(euler_characteristic(tet) == 2);
  CHECK(is_closed_manifold(tet));
  CHECK(enclosed_volume(tet) == doctest::Approx(1.0 / 6.0));
  tet.faces.pop_back();
  CHECK_FALSE(is_closed_manifold(tet));
}

TEST_CASE("obj and stl output") {
  const auto m = marching_cubes(two_blocks());
  test::TempDir dir("mesh");
  write_obj(dir / "m.obj", m);
  write_stl(dir / "m.stl", m);

  std::ifstream obj(dir / "m.obj");
  std::string line;
  std::size_t v = 0, f = 0;
  while (std::getline(obj, line)) {
    if (line.rfind("v ", 0) == 0) ++v;
    if (line.rfind("f ", 0) == 0) ++f;
  }
  CHECK(v == m.vertices.size());
  CHECK(f == m.faces.size());
  CHECK(std::filesystem::file_size(dir / "m.stl") == 84 + 50 * m.faces.size());
}
