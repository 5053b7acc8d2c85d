#include <cmath>
#include <map>
#include <set>

#include "doctest.h"
#include "support.hpp"
#include "tsn/data.hpp"
#include "tsn/degrade.hpp"

using namespace tsn;
using namespace tsn::data;

namespace {

double mask_fraction(const Mask& m) {
  double s = 0;
  for (double v : m.pixels()) s += v;
  return s / static_cast<double>(m.size());
}

bool binary(const Mask& m) {
  for (double v : m.pixels()) {
    if (v != 0.0 && v != 1.0) return false;
  }
  return true;
}

// Fraction of the mask lying on bright (tooth) pixels.
double bright_overlap(const Image& img, const Mask& m) {
  double hit = 0, total = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i] > 0.5) {
      total += 1;
      hit += img[i] > 0.5;
    }
  }
  return total > 0 ? hit / total : 1.0;
}

}  // namespace

TEST_CASE("phantoms are deterministic in the seed") {
  PhantomSpec spec;
  RandomState a(42), b(42), c(43);
  const auto p1 = generate_phantom(spec, a);
  const auto p2 = generate_phantom(spec, b);
  const auto p3 = generate_phantom(spec, c);
  CHECK(p1.image == p2.image);
  CHECK(p1.mask == p2.mask);
  CHECK(p1.image != p3.image);
}

TEST_CASE("default phantoms cover a moderate share of the image") {
  PhantomSpec spec;
  RandomState rng(1);
  for (int i = 0; i < 100; ++i) {
    const auto p = generate_phantom(spec, rng);
    const double f = mask_fraction(p.mask);
    REQUIRE(f > 0.0);
    REQUIRE(f < 0.5);
    REQUIRE(binary(p.mask));
    for (double v : p.image.pixels()) REQUIRE((v >= 0.0 && v <= 1.0));
  }
}

TEST_CASE("anatomy respects the tooth count range and intensity band") {
  PhantomSpec spec;
  RandomState rng(2);
  for (int i = 0; i < 50; ++i) {
    const auto a = draw_anatomy(spec, rng);
    CHECK(a.teeth >= spec.teeth_min);
    CHECK(a.teeth <= spec.teeth_max);
    for (double v : a.intensity) {
      CHECK(v >= 0.6);
      CHECK(v <= 0.9);
    }
  }
}

TEST_CASE("artifact slices are squared and streaks stay near the teeth") {
  PhantomSpec spec;
  spec.noise_sigma = 0.0;
  RandomState r1(3);
  const auto anatomy = draw_anatomy(spec, r1);
  RandomState a(9), b(9);
  const auto clean = render_phantom(spec, anatomy, 1.0, QualityTag::Clean, a);
  const auto art = render_phantom(spec, anatomy, 1.0, QualityTag::Artifact, b);
  CHECK(art.mask == clean.mask);
  const Image squared = degrade::artifact_degrade(clean.image);

  // Dilate the mask by 3 px; outside it the artifact slice is exactly the squared clean slice.
  const int h = spec.height, w = spec.width;
  int changed = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      bool near = false;
      for (int dy = -3; dy <= 3 && !near; ++dy)
        for (int dx = -3; dx <= 3 && !near; ++dx) {
          const int yy = y + dy, xx = x + dx;
          near = yy >= 0 && yy < h && xx >= 0 && xx < w && clean.mask(yy, xx) > 0.5;
        }
      if (!near) {
        REQUIRE(art.image(y, x) == doctest::Approx(squared(y, x)).epsilon(1e-12));
      } else if (std::abs(art.image(y, x) - squared(y, x)) > 1e-9) {
        ++changed;
      }
    }
  CHECK(changed > 0);
}

TEST_CASE("dataset generation, split and manifest round-trip") {
  test::TempDir dir("data");
  PhantomSpec spec;
  spec.seed = 5;
  const auto m = generate_dataset(spec, 10, 5, dir.path());
  CHECK(m.entries.size() == 50);
  std::set<std::string> patients;
  for (const auto& e : m.entries) patients.insert(e.patient_id);
  CHECK(patients.size() == 10);

  const auto train = m.patients(Split::Train), test = m.patients(Split::Test);
  CHECK(test.size() == 1);
  CHECK(train.size() == 9);
  for (const auto& p : test) CHECK(train.count(p) == 0);

  const auto back = read_manifest(dir / kManifestName);
  CHECK(back == m);
  CHECK(load_dataset(dir.path()) == m);

  const auto samples = load_samples(m, Split::Test);
  CHECK(samples.size() == 5);
  for (const auto& s : samples) {
    CHECK(s.image.height() == 64);
    CHECK(binary(s.mask));
  }
}

TEST_CASE("dataset generation is reproducible") {
  test::TempDir a("data_a"), b("data_b");
  PhantomSpec spec;
  spec.seed = 6;
  const auto ma = generate_dataset(spec, 4, 3, a.path());
  const auto mb = generate_dataset(spec, 4, 3, b.path());
  CHECK(ma == mb);
  const auto sa = load_samples(ma, Split::Train), sb = load_samples(mb, Split::Train);
  REQUIRE(sa.size() == sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i) {
    CHECK(sa[i].image == sb[i].image);
    CHECK(sa[i].mask == sb[i].mask);
  }
}

TEST_CASE("quality tag histogram follows the configured fractions") {
  test::TempDir dir("data_tags");
  PhantomSpec spec;
  spec.seed = 8;
  spec.height = spec.width = 32;
  const auto m = generate_dataset(spec, 100, 5, dir.path());
  std::map<QualityTag, int> counts;
  for (const auto& e : m.entries) ++counts[e.quality];
  const double n = static_cast<double>(m.entries.size());
  CHECK(std::abs(counts[QualityTag::Blurred] / n - 0.2) <= 0.05);
  CHECK(std::abs(counts[QualityTag::Artifact] / n - 0.2) <= 0.05);
  CHECK(std::abs(counts[QualityTag::Clean] / n - 0.6) <= 0.05);
}

TEST_CASE("manifest loading rejects missing files and leaked patients") {
  test::TempDir dir("data_bad");
  PhantomSpec spec;
  auto m = generate_dataset(spec, 3, 2, dir.path());
  std::filesystem::remove(dir.path() / m.entries[0].image_path);
  CHECK_THROWS_AS(read_manifest(dir / kManifestName), IoError);

  test::TempDir dir2("data_leak");
  auto m2 = generate_dataset(spec, 3, 2, dir2.path());
  for (auto& e : m2.entries) {
    if (e.patient_id == m2.entries[0].patient_id && e.slice_id == 1) {
      e.split = e.split == Split::Train ? Split::Test : Split::Train;
    }
  }
  write_manifest(m2, dir2 / kManifestName);
  CHECK_THROWS_AS(read_manifest(dir2 / kManifestName), ValidationError);
}

TEST_CASE("phantom parameter validation and JSON") {
  PhantomSpec spec;
  CHECK_NOTHROW(spec.validate());
  spec.blur_fraction = 0.9;
  CHECK_THROWS_AS(spec.validate(), ValidationError);
  spec = PhantomSpec{};
  spec.teeth_min = 10;
  spec.teeth_max = 9;
  CHECK_THROWS_AS(spec.validate(), ValidationError);
  spec = PhantomSpec{};
  spec.seed = 77;
  const nlohmann::json j = spec;
  CHECK(j.get<PhantomSpec>() == spec);
  nlohmann::json bad = j;
  bad["colour"] = 1;
  CHECK_THROWS_AS(bad.get<PhantomSpec>(), ValidationError);
  CHECK_THROWS_AS(generate_dataset(PhantomSpec{}, 1, 5, "/nonexistent/never"), ValidationError);
}

TEST_CASE("augmentation identities") {
  PhantomSpec spec;
  RandomState rng(10);
  const auto p = generate_phantom(spec, rng);

  const auto [i0, m0] = augment(p.image, p.mask, AugmentParams{});
  CHECK(i0 == p.image);
  CHECK(m0 == p.mask);

  const auto [i1, m1] = augment(p.image, p.mask, AugmentParams{true, false, 0.0});
  const auto [i2, m2] = augment(i1, m1, AugmentParams{true, false, 0.0});
  CHECK(i2 == p.image);
  CHECK(m2 == p.mask);
  CHECK(i1(3, 0) == p.image(3, spec.width - 1));

  const auto [v1, vm1] = augment(p.image, p.mask, AugmentParams{false, true, 0.0});
  CHECK(v1(0, 5) == p.image(spec.height - 1, 5));
  CHECK(vm1(0, 5) == p.mask(spec.height - 1, 5));
}

TEST_CASE("rotation keeps the mask binary and aligned with the teeth") {
  PhantomSpec spec;
  spec.noise_sigma = 0.0;
  RandomState rng(11);
  for (int t = 0; t < 100; ++t) {
    const auto p = generate_phantom(spec, rng);
    const AugmentParams params = draw_augment(rng);
    CHECK(std::abs(params.angle_deg) <= kMaxRotationDeg);
    const auto [img, mask] = augment(p.image, p.mask, params);
    REQUIRE(binary(mask));
    REQUIRE(bright_overlap(img, mask) >= 0.95 * bright_overlap(p.image, p.mask));
  }
}

TEST_CASE("augmentation draws are balanced") {
  RandomState rng(12);
  int h = 0, v = 0;
  double mean = 0;
  const int n = 4000;
  for (int i = 0; i < n; ++i) {
    const auto a = draw_augment(rng);
    h += a.hflip;
    v += a.vflip;
    mean += a.angle_deg;
  }
  CHECK(std::abs(h / double(n) - 0.5) < 0.05);
  CHECK(std::abs(v / double(n) - 0.5) < 0.05);
  CHECK(std::abs(mean / n) < 1.0);
}
