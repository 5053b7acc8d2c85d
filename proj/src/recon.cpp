#include "tsn/recon.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <unordered_map>

namespace tsn::recon {

LabelVolume::LabelVolume(int d, int h, int w, std::array<double, 3> sp)
    : depth(d), height(h), width(w), voxels(static_cast<std::size_t>(d) * h * w, 0), spacing(sp) {
  if (d < 1 || h < 1 || w < 1) throw DimensionError("label volume dims must be positive");
}

std::uint64_t LabelVolume::checksum() const {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  const auto mix = [&](std::uint64_t v) {
    hash ^= v;
    hash *= 0x100000001b3ULL;
  };
  mix(static_cast<std::uint64_t>(depth));
  mix(static_cast<std::uint64_t>(height));
  mix(static_cast<std::uint64_t>(width));
  for (auto v : voxels) mix(v);
  return hash;
}

LabelVolume stack_slices(const std::vector<Mask>& masks, std::array<double, 3> spacing) {
  if (masks.empty()) throw DimensionError("stack_slices: no masks");
  const int h = masks.front().height(), w = masks.front().width();
  LabelVolume vol(static_cast<int>(masks.size()), h, w, spacing);
  for (std::size_t k = 0; k < masks.size(); ++k) {
    if (masks[k].height() != h || masks[k].width() != w) {
      throw DimensionError("stack_slices: slice " + std::to_string(k) + " has different dims");
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) vol.at(static_cast<int>(k), y, x) = masks[k](y, x) >= 0.5 ? 1 : 0;
    }
  }
  return vol;
}

namespace {

// Bourke corner offsets (x, y, z) and edge endpoints.
constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                               {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
constexpr int kEdge[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6},
                              {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};

// Scalar field on the padded grid: one background layer on every side.
struct Field {
  int nx, ny, nz;
  std::vector<double> v;
  double operator()(int x, int y, int z) const {
    return v[(static_cast<std::size_t>(z) * ny + y) * nx + x];
  }
};

Field build_field(const LabelVolume& vol, bool box_filter) {
  Field f{vol.width + 2, vol.height + 2, vol.depth + 2, {}};
  f.v.assign(static_cast<std::size_t>(f.nx) * f.ny * f.nz, 0.0);
  const auto raw = [&](int x, int y, int z) -> double {
    if (x < 0 || y < 0 || z < 0 || x >= vol.width || y >= vol.height || z >= vol.depth) return 0.0;
    return vol.at(z, y, x);
  };
  for (int z = 0; z < vol.depth; ++z) {
    for (int y = 0; y < vol.height; ++y) {
      for (int x = 0; x < vol.width; ++x) {
        double value = raw(x, y, z);
        if (box_filter) {
          double sum = 0.0;
          for (int dz = -1; dz <= 1; ++dz)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) sum += raw(x + dx, y + dy, z + dz);
          value = sum / 27.0;
        }
        f.v[(static_cast<std::size_t>(z + 1) * f.ny + (y + 1)) * f.nx + (x + 1)] = value;
      }
    }
  }
  return f;
}

double triangle_area2(const std::array<double, 3>& a, const std::array<double, 3>& b,
                      const std::array<double, 3>& c) {
  const double ux = b[0] - a[0], uy = b[1] - a[1], uz = b[2] - a[2];
  const double vx = c[0] - a[0], vy = c[1] - a[1], vz = c[2] - a[2];
  const double cx = uy * vz - uz * vy, cy = uz * vx - ux * vz, cz = ux * vy - uy * vx;
  return cx * cx + cy * cy + cz * cz;
}

}  // namespace

TriMesh marching_cubes(const LabelVolume& vol, double iso, bool box_filter) {
  TriMesh mesh;
  if (vol.voxels.empty()) return mesh;
  const Field f = build_field(vol, box_filter);
  std::unordered_map<std::uint64_t, int> vertex_of_edge;

  // Grid edge id: origin grid point plus axis.
  const auto edge_key = [&](int x, int y, int z, int axis) {
    return ((static_cast<std::uint64_t>(z) * f.ny + y) * f.nx + x) * 3 + static_cast<std::uint64_t>(axis);
  };

  for (int z = 0; z + 1 < f.nz; ++z) {
    for (int y = 0; y + 1 < f.ny; ++y) {
      for (int x = 0; x + 1 < f.nx; ++x) {
        double val[8];
        int cube = 0;
        for (int c = 0; c < 8; ++c) {
          val[c] = f(x + kCorner[c][0], y + kCorner[c][1], z + kCorner[c][2]);
          if (val[c] < iso) cube |= 1 << c;
        }
        const int edges = detail::kEdgeTable[cube];
        if (edges == 0) continue;
        int vert[12];
        for (int e = 0; e < 12; ++e) {
          if (!(edges & (1 << e))) continue;
          const int a = kEdge[e][0], b = kEdge[e][1];
          int lo = a, hi = b;
          if (kCorner[a][0] + kCorner[a][1] + kCorner[a][2] > kCorner[b][0] + kCorner[b][1] + kCorner[b][2]) {
            std::swap(lo, hi);
          }
          const int ox = x + kCorner[lo][0], oy = y + kCorner[lo][1], oz = z + kCorner[lo][2];
          const int axis = kCorner[hi][0] != kCorner[lo][0] ? 0 : (kCorner[hi][1] != kCorner[lo][1] ? 1 : 2);
          const auto key = edge_key(ox, oy, oz, axis);
          const auto it = vertex_of_edge.find(key);
          if (it != vertex_of_edge.end()) {
            vert[e] = it->second;
            continue;
          }
          const double t = (iso - val[lo]) / (val[hi] - val[lo]);
          std::array<double, 3> p{static_cast<double>(ox), static_cast<double>(oy), static_cast<double>(oz)};
          p[static_cast<std::size_t>(axis)] += t;
          // Undo padding and apply spacing.
          for (std::size_t k = 0; k < 3; ++k) p[k] = (p[k] - 1.0) * vol.spacing[k];
          vert[e] = static_cast<int>(mesh.vertices.size());
          mesh.vertices.push_back(p);
          vertex_of_edge.emplace(key, vert[e]);
        }
        const int* tri = detail::kTriTable[cube];
        for (int i = 0; tri[i] != -1; i += 3) {
          const std::array<int, 3> face{vert[tri[i]], vert[tri[i + 1]], vert[tri[i + 2]]};
          if (face[0] == face[1] || face[1] == face[2] || face[0] == face[2]) continue;
          if (triangle_area2(mesh.vertices[static_cast<std::size_t>(face[0])],
                             mesh.vertices[static_cast<std::size_t>(face[1])],
                             mesh.vertices[static_cast<std::size_t>(face[2])]) == 0.0) {
            continue;
          }
          mesh.faces.push_back(face);
        }
      }
    }
  }
  return mesh;
}

namespace {

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int i) {
    while (parent[static_cast<std::size_t>(i)] != i) {
      parent[static_cast<std::size_t>(i)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(i)])];
      i = parent[static_cast<std::size_t>(i)];
    }
    return i;
  }
  void unite(int a, int b) { parent[static_cast<std::size_t>(find(a))] = find(b); }
};

std::map<std::pair<int, int>, int> edge_use(const TriMesh& mesh) {
  std::map<std::pair<int, int>, int> uses;
  for (const auto& f : mesh.faces) {
    for (int k = 0; k < 3; ++k) {
      const int a = f[static_cast<std::size_t>(k)], b = f[static_cast<std::size_t>((k + 1) % 3)];
      ++uses[{std::min(a, b), std::max(a, b)}];
    }
  }
  return uses;
}

}  // namespace

int count_components(const TriMesh& mesh) {
  if (mesh.faces.empty()) return 0;
  UnionFind uf(mesh.vertices.size());
  std::vector<bool> used(mesh.vertices.size(), false);
  for (const auto& f : mesh.faces) {
    uf.unite(f[0], f[1]);
    uf.unite(f[1], f[2]);
    for (int v : f) used[static_cast<std::size_t>(v)] = true;
  }
  int roots = 0;
  for (std::size_t i = 0; i < used.size(); ++i) {
    if (used[i] && uf.find(static_cast<int>(i)) == static_cast<int>(i)) ++roots;
  }
  return roots;
}

long euler_characteristic(const TriMesh& mesh) {
  return static_cast<long>(mesh.vertices.size()) - static_cast<long>(edge_use(mesh).size()) +
         static_cast<long>(mesh.faces.size());
}

bool is_closed_manifold(const TriMesh& mesh) {
  if (mesh.faces.empty()) return false;
  for (const auto& [edge, n] : edge_use(mesh)) {
    if (n != 2) return false;
  }
  return true;
}

double enclosed_volume(const TriMesh& mesh) {
  double six_v = 0.0;
  for (const auto& f : mesh.faces) {
    const auto& a = mesh.vertices[static_cast<std::size_t>(f[0])];
    const auto& b = mesh.vertices[static_cast<std::size_t>(f[1])];
    const auto& c = mesh.vertices[static_cast<std::size_t>(f[2])];
    six_v += a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0]) +
             a[2] * (b[0] * c[1] - b[1] * c[0]);
  }
  return six_v / 6.0;
}

void write_obj(const std::filesystem::path& path, const TriMesh& mesh) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  char buf[128];
  for (const auto& v : mesh.vertices) {
    std::snprintf(buf, sizeof buf, "v %.9g %.9g %.9g\n", v[0], v[1], v[2]);
    out << buf;
  }
  for (const auto& f : mesh.faces) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

void write_stl(const std::filesystem::path& path, const TriMesh& mesh) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  char header[80] = {};
  std::strncpy(header, "tsn binary stl", sizeof header);
  out.write(header, sizeof header);
  const auto count = static_cast<std::uint32_t>(mesh.faces.size());
  out.write(reinterpret_cast<const char*>(&count), sizeof count);
  for (const auto& f : mesh.faces) {
    const auto& a = mesh.vertices[static_cast<std::size_t>(f[0])];
    const auto& b = mesh.vertices[static_cast<std::size_t>(f[1])];
    const auto& c = mesh.vertices[static_cast<std::size_t>(f[2])];
    double n[3] = {(b[1] - a[1]) * (c[2] - a[2]) - (b[2] - a[2]) * (c[1] - a[1]),
                   (b[2] - a[2]) * (c[0] - a[0]) - (b[0] - a[0]) * (c[2] - a[2]),
                   (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])};
    const double len = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
    float rec[12];
    for (int k = 0; k < 3; ++k) rec[k] = len > 0 ? static_cast<float>(n[k] / len) : 0.0f;
    for (int k = 0; k < 3; ++k) {
      rec[3 + k] = static_cast<float>(a[static_cast<std::size_t>(k)]);
      rec[6 + k] = static_cast<float>(b[static_cast<std::size_t>(k)]);
      rec[9 + k] = static_cast<float>(c[static_cast<std::size_t>(k)]);
    }
    out.write(reinterpret_cast<const char*>(rec), sizeof rec);
    const std::uint16_t attr = 0;
    out.write(reinterpret_cast<const char*>(&attr), sizeof attr);
  }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace tsn::recon
