#pragma once

// Synthetic dental phantoms, dataset manifests and geometric augmentation.

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "tsn/image.hpp"
#include "tsn/rng.hpp"

namespace tsn::data {

enum class QualityTag { Clean, Blurred, Artifact };
enum class Split { Train, Test };

std::string to_string(QualityTag tag);
std::string to_string(Split split);
QualityTag parse_quality(const std::string& s);
Split parse_split(const std::string& s);

struct PhantomSpec {
  int height = 64;
  int width = 64;
  int teeth_min = 8;
  int teeth_max = 16;
  double noise_sigma = 0.03;
  double arch_curvature = 1.0;  // scales the parabola depth relative to the image height
  double artifact_fraction = 0.2;
  double blur_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const PhantomSpec&) const = default;
};

void to_json(nlohmann::json& j, const PhantomSpec& s);
void from_json(const nlohmann::json& j, PhantomSpec& s);

/// Per-patient anatomy: arch placement and tooth sizes shared by all slices.
struct PatientAnatomy {
  double center_x = 0.0;
  double top_y = 0.0;
  double depth = 0.0;      // vertical drop of the arch at its ends
  double half_span = 0.0;  // horizontal half-width of the arch
  int teeth = 0;
  std::vector<double> along;   // semi-axis along the arch per tooth
  std::vector<double> across;  // semi-axis across the arch per tooth
  std::vector<double> intensity;
  std::vector<double> tilt;  // small per-tooth rotation in radians
};

PatientAnatomy draw_anatomy(const PhantomSpec& spec, RandomState& rng);

struct Phantom {
  Image image;
  Mask mask;
};

/// Renders one slice. `slice_scale` shrinks the teeth (slices further from the
/// crown plane); `tag` selects post-processing of the image only.
Phantom render_phantom(const PhantomSpec& spec, const PatientAnatomy& anatomy, double slice_scale,
                       QualityTag tag, RandomState& rng);

/// Single phantom with freshly drawn anatomy.
Phantom generate_phantom(const PhantomSpec& spec, RandomState& rng, QualityTag tag = QualityTag::Clean);

struct ManifestEntry {
  std::string patient_id;
  int slice_id = 0;
  std::string image_path;  // relative to the dataset root
  std::string mask_path;
  Split split = Split::Train;
  QualityTag quality = QualityTag::Clean;

  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;

  std::vector<ManifestEntry> select(Split split) const;
  std::set<std::string> patients(Split split) const;
  bool operator==(const DatasetManifest& o) const { return entries == o.entries; }
};

inline constexpr const char* kManifestName = "manifest.jsonl";

/// Writes images/, masks/ and manifest.jsonl under `out_dir`. The last
/// ceil(test_fraction·n) patients of a seeded permutation form the test split.
DatasetManifest generate_dataset(const PhantomSpec& spec, int n_patients, int slices_per_patient,
                                 const std::filesystem::path& out_dir, double test_fraction = 0.1);

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& file);
/// Reads a JSON-lines manifest; every referenced file must exist.
DatasetManifest read_manifest(const std::filesystem::path& file);
/// Accepts either a dataset directory or the manifest file itself.
DatasetManifest load_dataset(const std::filesystem::path& dir_or_file);

struct Sample {
  std::string patient_id;
  int slice_id = 0;
  QualityTag quality = QualityTag::Clean;
  Image image;
  Mask mask;
};

std::vector<Sample> load_samples(const DatasetManifest& manifest, Split split);

struct AugmentParams {
  bool hflip = false;
  bool vflip = false;
  double angle_deg = 0.0;
};

inline constexpr double kMaxRotationDeg = 15.0;

/// Flips with probability 1/2 each and a uniform angle in ±15°.
AugmentParams draw_augment(RandomState& rng);

/// Applies the flips, then rotates about the image center (bilinear for the
/// image with clamped borders, nearest neighbour for the mask, zero outside).
std::pair<Image, Mask> augment(const Image& img, const Mask& mask, const AugmentParams& params);
std::pair<Image, Mask> augment(const Image& img, const Mask& mask, RandomState& rng);

}  // namespace tsn::data
