#include "tsn/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "tsn/degrade.hpp"

namespace tsn::data {

std::string to_string(QualityTag tag) {
  switch (tag) {
    case QualityTag::Clean:
      return "clean";
    case QualityTag::Blurred:
      return "blurred";
    case QualityTag::Artifact:
      return "artifact";
  }
  return "?";
}

std::string to_string(Split split) { return split == Split::Train ? "train" : "test"; }

QualityTag parse_quality(const std::string& s) {
  if (s == "clean") return QualityTag::Clean;
  if (s == "blurred") return QualityTag::Blurred;
  if (s == "artifact") return QualityTag::Artifact;
  throw ValidationError("unknown quality tag '" + s + "'");
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  throw ValidationError("unknown split '" + s + "'");
}

void PhantomSpec::validate() const {
  const auto fail = [](const std::string& m) { throw ValidationError("phantom: " + m); };
  if (height < 16 || width < 16) fail("image dims must be at least 16");
  if (teeth_min < 1 || teeth_max < teeth_min) fail("teeth range must be non-empty and positive");
  if (!(noise_sigma >= 0.0)) fail("noise_sigma must be non-negative");
  if (!(arch_curvature > 0.0)) fail("arch_curvature must be positive");
  if (!(artifact_fraction >= 0.0 && artifact_fraction <= 1.0)) fail("artifact_fraction must lie in [0,1]");
  if (!(blur_fraction >= 0.0 && blur_fraction <= 1.0)) fail("blur_fraction must lie in [0,1]");
  if (artifact_fraction + blur_fraction > 1.0) fail("artifact_fraction + blur_fraction must not exceed 1");
  if (height % 2 != 0 || width % 2 != 0) fail("image dims must be even so blurred slices can be rendered");
}

void to_json(nlohmann::json& j, const PhantomSpec& s) {
  j = nlohmann::json{{"height", s.height},
                     {"width", s.width},
                     {"teeth_min", s.teeth_min},
                     {"teeth_max", s.teeth_max},
                     {"noise_sigma", s.noise_sigma},
                     {"arch_curvature", s.arch_curvature},
                     {"artifact_fraction", s.artifact_fraction},
                     {"blur_fraction", s.blur_fraction},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, PhantomSpec& s) {
  static const std::set<std::string> known{"height",         "width",         "teeth_min",
                                           "teeth_max",      "noise_sigma",   "arch_curvature",
                                           "artifact_fraction", "blur_fraction", "seed"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ValidationError("phantom: unknown key '" + key + "'");
  }
  PhantomSpec d = s;
  d.height = j.value("height", d.height);
  d.width = j.value("width", d.width);
  d.teeth_min = j.value("teeth_min", d.teeth_min);
  d.teeth_max = j.value("teeth_max", d.teeth_max);
  d.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  d.arch_curvature = j.value("arch_curvature", d.arch_curvature);
  d.artifact_fraction = j.value("artifact_fraction", d.artifact_fraction);
  d.blur_fraction = j.value("blur_fraction", d.blur_fraction);
  d.seed = j.value("seed", d.seed);
  s = d;
}

namespace {

struct ArchPoint {
  double x, y, tx, ty;  // position and unit tangent
};

// Arch: x = cx + half_span·t, y = top + depth·t², t ∈ [-1, 1], sampled at equal arc length.
std::vector<ArchPoint> arch_positions(const PatientAnatomy& a, int count) {
  constexpr int kSamples = 2000;
  std::vector<double> t(kSamples + 1), s(kSamples + 1, 0.0);
  for (int i = 0; i <= kSamples; ++i) t[static_cast<std::size_t>(i)] = -1.0 + 2.0 * i / kSamples;
  for (int i = 1; i <= kSamples; ++i) {
    const auto u = static_cast<std::size_t>(i);
    const double dx = a.half_span * (t[u] - t[u - 1]);
    const double dy = a.depth * (t[u] * t[u] - t[u - 1] * t[u - 1]);
    s[u] = s[u - 1] + std::hypot(dx, dy);
  }
  const double total = s.back();
  std::vector<ArchPoint> out;
  for (int k = 0; k < count; ++k) {
    const double target = total * (k + 0.5) / count;
    const auto it = std::lower_bound(s.begin(), s.end(), target);
    const auto idx = static_cast<std::size_t>(std::max<std::ptrdiff_t>(1, it - s.begin()));
    const double f = (target - s[idx - 1]) / std::max(1e-12, s[idx] - s[idx - 1]);
    const double tt = t[idx - 1] + f * (t[idx] - t[idx - 1]);
    double tx = a.half_span, ty = 2.0 * a.depth * tt;
    const double norm = std::hypot(tx, ty);
    out.push_back({a.center_x + a.half_span * tt, a.top_y + a.depth * tt * tt, tx / norm, ty / norm});
  }
  return out;
}

double arch_length(const PatientAnatomy& a) {
  constexpr int kSamples = 2000;
  double len = 0.0;
  for (int i = 1; i <= kSamples; ++i) {
    const double t0 = -1.0 + 2.0 * (i - 1) / kSamples, t1 = -1.0 + 2.0 * i / kSamples;
    len += std::hypot(a.half_span * (t1 - t0), a.depth * (t1 * t1 - t0 * t0));
  }
  return len;
}

void add_streaks(Image& img, const Mask& mask, const std::vector<ArchPoint>& centers, RandomState& rng) {
  const int h = img.height(), w = img.width();
  constexpr int kDilate = 3;
  Mask region(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (mask(y, x) == 0.0) continue;
      for (int dy = -kDilate; dy <= kDilate; ++dy) {
        for (int dx = -kDilate; dx <= kDilate; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < h && xx >= 0 && xx < w && dx * dx + dy * dy <= kDilate * kDilate) region(yy, xx) = 1.0;
        }
      }
    }
  }
  const int streaks = rng.uniform_int(2, 4);
  for (int s = 0; s < streaks; ++s) {
    const auto& c = centers[rng.below(centers.size())];
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double len = rng.uniform(0.15, 0.4) * std::min(h, w);
    const double strength = rng.uniform(0.2, 0.35);
    const int steps = static_cast<int>(len * 2.0);
    for (int k = 0; k <= steps; ++k) {
      const double d = len * k / steps;
      const int x = static_cast<int>(std::lround(c.x + d * std::cos(angle)));
      const int y = static_cast<int>(std::lround(c.y + d * std::sin(angle)));
      if (x < 0 || y < 0 || x >= w || y >= h || region(y, x) == 0.0) continue;
      img(y, x) = std::min(1.0, img(y, x) + strength * (1.0 - d / len));
    }
  }
}

}  // namespace

PatientAnatomy draw_anatomy(const PhantomSpec& spec, RandomState& rng) {
  spec.validate();
  PatientAnatomy a;
  const double h = spec.height, w = spec.width;
  a.center_x = w * 0.5 + rng.uniform(-0.04, 0.04) * w;
  a.top_y = h * rng.uniform(0.16, 0.22);
  a.depth = h * spec.arch_curvature * rng.uniform(0.42, 0.5);
  a.half_span = w * rng.uniform(0.33, 0.38);
  a.teeth = rng.uniform_int(spec.teeth_min, spec.teeth_max);
  const double spacing = arch_length(a) / a.teeth;
  for (int k = 0; k < a.teeth; ++k) {
    a.along.push_back(spacing * rng.uniform(0.46, 0.56));
    a.across.push_back(h * rng.uniform(0.075, 0.1));
    a.intensity.push_back(rng.uniform(0.6, 0.9));
    a.tilt.push_back(rng.uniform(-0.12, 0.12));
  }
  return a;
}

Phantom render_phantom(const PhantomSpec& spec, const PatientAnatomy& anatomy, double slice_scale,
                       QualityTag tag, RandomState& rng) {
  const int h = spec.height, w = spec.width;
  Phantom p{Image(h, w), Mask(h, w)};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) p.image(y, x) = 0.3 + 0.04 * (static_cast<double>(y) / h - 0.5);
  }
  const auto centers = arch_positions(anatomy, anatomy.teeth);
  for (int k = 0; k < anatomy.teeth; ++k) {
    const auto& c = centers[static_cast<std::size_t>(k)];
    const auto u = static_cast<std::size_t>(k);
    const double a = anatomy.along[u] * slice_scale;
    const double b = anatomy.across[u] * slice_scale;
    const double ct = std::cos(anatomy.tilt[u]), st = std::sin(anatomy.tilt[u]);
    const double ex = c.tx * ct - c.ty * st, ey = c.tx * st + c.ty * ct;  // tooth long axis is the normal
    const int x0 = std::max(0, static_cast<int>(c.x - a - b - 1)), x1 = std::min(w - 1, static_cast<int>(c.x + a + b + 1));
    const int y0 = std::max(0, static_cast<int>(c.y - a - b - 1)), y1 = std::min(h - 1, static_cast<int>(c.y + a + b + 1));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double dx = x - c.x, dy = y - c.y;
        const double along = (dx * ex + dy * ey) / a;
        const double across = (-dx * ey + dy * ex) / b;
        // Superellipse (exponent 3): a rounded rectangle.
        if (std::pow(std::abs(along), 3.0) + std::pow(std::abs(across), 3.0) <= 1.0) {
          p.mask(y, x) = 1.0;
          p.image(y, x) = anatomy.intensity[u];
        }
      }
    }
  }
  for (auto& v : p.image.pixels()) v = std::clamp(v + spec.noise_sigma * rng.normal(), 0.0, 1.0);
  if (tag == QualityTag::Blurred) {
    p.image = degrade::blur_degrade(p.image, 1);
  } else if (tag == QualityTag::Artifact) {
    p.image = degrade::artifact_degrade(p.image);
    add_streaks(p.image, p.mask, centers, rng);
  }
  return p;
}

Phantom generate_phantom(const PhantomSpec& spec, RandomState& rng, QualityTag tag) {
  const PatientAnatomy anatomy = draw_anatomy(spec, rng);
  return render_phantom(spec, anatomy, 1.0, tag, rng);
}

std::vector<ManifestEntry> DatasetManifest::select(Split split) const {
  std::vector<ManifestEntry> out;
  std::copy_if(entries.begin(), entries.end(), std::back_inserter(out),
               [&](const ManifestEntry& e) { return e.split == split; });
  return out;
}

std::set<std::string> DatasetManifest::patients(Split split) const {
  std::set<std::string> out;
  for (const auto& e : entries) {
    if (e.split == split) out.insert(e.patient_id);
  }
  return out;
}

namespace {

std::string patient_name(int p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "p%03d", p);
  return buf;
}

double slice_scale(int k, int slices) {
  if (slices <= 1) return 1.0;
  const double mid = 0.5 * (slices - 1);
  return 1.0 - 0.2 * std::abs(k - mid) / mid;
}

constexpr std::uint64_t kAnatomyStream = 1;
constexpr std::uint64_t kSliceStream = 2;
constexpr std::uint64_t kTagStream = 3;
constexpr std::uint64_t kSplitStream = 4;

}  // namespace

DatasetManifest generate_dataset(const PhantomSpec& spec, int n_patients, int slices_per_patient,
                                 const std::filesystem::path& out_dir, double test_fraction) {
  spec.validate();
  if (n_patients < 2) throw ValidationError("generate_dataset: need at least 2 patients");
  if (slices_per_patient < 1) throw ValidationError("generate_dataset: need at least 1 slice per patient");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ValidationError("test_fraction must lie in (0,1)");

  const int total = n_patients * slices_per_patient;
  // Exact tag counts from the configured fractions, then a seeded shuffle.
  std::vector<QualityTag> tags(static_cast<std::size_t>(total), QualityTag::Clean);
  const auto n_blur = static_cast<std::size_t>(std::lround(spec.blur_fraction * total));
  const auto n_art = static_cast<std::size_t>(std::lround(spec.artifact_fraction * total));
  for (std::size_t i = 0; i < n_blur && i < tags.size(); ++i) tags[i] = QualityTag::Blurred;
  for (std::size_t i = n_blur; i < n_blur + n_art && i < tags.size(); ++i) tags[i] = QualityTag::Artifact;
  RandomState tag_rng(derive_seed(spec.seed, kTagStream));
  tag_rng.shuffle(tags.begin(), tags.end());

  std::vector<int> order(static_cast<std::size_t>(n_patients));
  for (int p = 0; p < n_patients; ++p) order[static_cast<std::size_t>(p)] = p;
  RandomState split_rng(derive_seed(spec.seed, kSplitStream));
  split_rng.shuffle(order.begin(), order.end());
  const int n_test = std::clamp(static_cast<int>(std::ceil(test_fraction * n_patients - 1e-9)), 1, n_patients - 1);
  std::vector<bool> is_test(static_cast<std::size_t>(n_patients), false);
  for (int i = n_patients - n_test; i < n_patients; ++i) is_test[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;

  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  std::filesystem::create_directories(out_dir / "masks", ec);
  if (ec) throw IoError("cannot create dataset directories under " + out_dir.string() + ": " + ec.message());

  DatasetManifest manifest;
  manifest.root = out_dir;
  manifest.entries.resize(static_cast<std::size_t>(total));
#pragma omp parallel for schedule(dynamic)
  for (int idx = 0; idx < total; ++idx) {
    const int p = idx / slices_per_patient, k = idx % slices_per_patient;
    RandomState anatomy_rng(derive_seed(spec.seed, kAnatomyStream, static_cast<std::uint64_t>(p)));
    const PatientAnatomy anatomy = draw_anatomy(spec, anatomy_rng);
    RandomState slice_rng(derive_seed(spec.seed, kSliceStream, static_cast<std::uint64_t>(idx)));
    const QualityTag tag = tags[static_cast<std::size_t>(idx)];
    const Phantom ph = render_phantom(spec, anatomy, slice_scale(k, slices_per_patient), tag, slice_rng);
    ManifestEntry e;
    e.patient_id = patient_name(p);
    e.slice_id = k;
    char name[64];
    std::snprintf(name, sizeof name, "%s_s%02d.png", e.patient_id.c_str(), k);
    e.image_path = std::string("images/") + name;
    e.mask_path = std::string("masks/") + name;
    e.split = is_test[static_cast<std::size_t>(p)] ? Split::Test : Split::Train;
    e.quality = tag;
    write_png(out_dir / e.image_path, ph.image);
    write_png(out_dir / e.mask_path, ph.mask);
    manifest.entries[static_cast<std::size_t>(idx)] = e;
  }
  write_manifest(manifest, out_dir / kManifestName);
  return manifest;
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw IoError("cannot write " + file.string());
  for (const auto& e : manifest.entries) {
    nlohmann::ordered_json j{{"patient_id", e.patient_id}, {"slice_id", e.slice_id},
                             {"image_path", e.image_path}, {"mask_path", e.mask_path},
                             {"split", to_string(e.split)}, {"quality_tag", to_string(e.quality)}};
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + file.string());
}

DatasetManifest read_manifest(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read manifest " + file.string());
  DatasetManifest m;
  m.root = file.parent_path();
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ManifestEntry e;
      e.patient_id = j.at("patient_id").get<std::string>();
      e.slice_id = j.at("slice_id").get<int>();
      e.image_path = j.at("image_path").get<std::string>();
      e.mask_path = j.at("mask_path").get<std::string>();
      e.split = parse_split(j.at("split").get<std::string>());
      e.quality = parse_quality(j.at("quality_tag").get<std::string>());
      m.entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw IoError(file.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  for (const auto& e : m.entries) {
    for (const auto& rel : {e.image_path, e.mask_path}) {
      if (!std::filesystem::exists(m.root / rel)) throw IoError("manifest references missing file " + (m.root / rel).string());
    }
  }
  std::set<std::string> train = m.patients(Split::Train);
  for (const auto& id : m.patients(Split::Test)) {
    if (train.count(id)) throw ValidationError("patient " + id + " appears in both splits");
  }
  return m;
}

DatasetManifest load_dataset(const std::filesystem::path& dir_or_file) {
  if (std::filesystem::is_directory(dir_or_file)) return read_manifest(dir_or_file / kManifestName);
  return read_manifest(dir_or_file);
}

std::vector<Sample> load_samples(const DatasetManifest& manifest, Split split) {
  std::vector<Sample> out;
  for (const auto& e : manifest.entries) {
    if (e.split != split) continue;
    out.push_back({e.patient_id, e.slice_id, e.quality, read_png_gray(manifest.root / e.image_path),
                   read_png_mask(manifest.root / e.mask_path)});
  }
  return out;
}

AugmentParams draw_augment(RandomState& rng) {
  AugmentParams p;
  p.hflip = rng.bernoulli(0.5);
  p.vflip = rng.bernoulli(0.5);
  p.angle_deg = rng.uniform(-kMaxRotationDeg, kMaxRotationDeg);
  return p;
}

namespace {

template <class P>
P flip(const P& src, bool horizontal, bool vertical) {
  P out(src.height(), src.width());
  const int h = src.height(), w = src.width();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) out(y, x) = src(vertical ? h - 1 - y : y, horizontal ? w - 1 - x : x);
  }
  return out;
}

}  // namespace

std::pair<Image, Mask> augment(const Image& img, const Mask& mask, const AugmentParams& params) {
  require_same_dims(img, mask, "augment");
  Image im = flip(img, params.hflip, params.vflip);
  Mask mk = flip(mask, params.hflip, params.vflip);
  if (params.angle_deg == 0.0) return {std::move(im), std::move(mk)};

  const int h = im.height(), w = im.width();
  const double cy = 0.5 * (h - 1), cx = 0.5 * (w - 1);
  const double rad = params.angle_deg * std::numbers::pi / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  Image out_img(h, w);
  Mask out_mask(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      // Inverse map: output pixel -> source location.
      const double dx = x - cx, dy = y - cy;
      const double sx = cx + c * dx + s * dy;
      const double sy = cy - s * dx + c * dy;
      const double bx = std::clamp(sx, 0.0, w - 1.0), by = std::clamp(sy, 0.0, h - 1.0);
      const int x0 = std::min(static_cast<int>(bx), w - 2 < 0 ? 0 : w - 2);
      const int y0 = std::min(static_cast<int>(by), h - 2 < 0 ? 0 : h - 2);
      const double fx = bx - x0, fy = by - y0;
      const double top = im(y0, x0) + fx * (im(y0, x0 + 1) - im(y0, x0));
      const double bot = im(y0 + 1, x0) + fx * (im(y0 + 1, x0 + 1) - im(y0 + 1, x0));
      out_img(y, x) = std::clamp(top + fy * (bot - top), 0.0, 1.0);
      const long nx = std::lround(sx), ny = std::lround(sy);
      out_mask(y, x) = (nx >= 0 && ny >= 0 && nx < w && ny < h) ? mk(static_cast<int>(ny), static_cast<int>(nx)) : 0.0;
    }
  }
  return {std::move(out_img), std::move(out_mask)};
}

std::pair<Image, Mask> augment(const Image& img, const Mask& mask, RandomState& rng) {
  return augment(img, mask, draw_augment(rng));
}

}  // namespace tsn::data
