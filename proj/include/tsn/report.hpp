#pragma once

// Metric tables, error overlays and training curves for a finished run.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tsn/image.hpp"
#include "tsn/metrics.hpp"
#include "tsn/trainer.hpp"

namespace tsn::report {

struct NamedSummary {
  std::string label;
  metrics::Summary summary;
};

/// Columns IoU, Dice, Recall, Precision as "mean±std" in percent.
std::string metrics_table_text(const std::vector<NamedSummary>& rows);
void write_metrics_table_csv(const std::filesystem::path& path, const std::vector<NamedSummary>& rows);

/// One row per variant with DS / SC / CCF check marks, then median metrics in percent.
std::string ablation_table_text(const std::vector<trainer::AblationRow>& rows);

inline constexpr std::uint8_t kFalseNegative[3] = {255, 0, 0};
inline constexpr std::uint8_t kFalsePositive[3] = {0, 255, 0};

/// Three panels side by side: input, ground truth, and the input tinted with
/// true positives (blue), false negatives (red) and false positives (green).
std::vector<std::uint8_t> overlay_panel(const Image& img, const Mask& pred_bin, const Mask& gt);
inline int overlay_width(int image_width) { return 3 * image_width; }

/// Loss components and test Dice per epoch as a standalone SVG.
std::string training_curve_svg(const trainer::TrainLog& log);

/// Fixed run directory layout.
struct RunLayout {
  std::filesystem::path root;
  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path log() const { return root / "log.csv"; }
  std::filesystem::path ckpt_dir() const { return root / "ckpt"; }
  std::filesystem::path checkpoint() const { return ckpt_dir() / "final.ckpt"; }
  std::filesystem::path metrics() const { return root / "metrics.csv"; }
  std::filesystem::path summary() const { return root / "summary.json"; }
  std::filesystem::path ablation() const { return root / "ablation.csv"; }
  std::filesystem::path report_dir() const { return root / "report"; }
};

/// Writes report/ under the run directory and returns the files produced.
/// Throws ValidationError listing every required input that is absent.
std::vector<std::filesystem::path> generate_report(const std::filesystem::path& run_dir);

}  // namespace tsn::report
