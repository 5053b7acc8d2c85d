#pragma once

// Training loop, evaluation, ablation grid and checkpoints.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsn/data.hpp"
#include "tsn/degrade.hpp"
#include "tsn/losses.hpp"
#include "tsn/metrics.hpp"
#include "tsn/model.hpp"

namespace tsn::trainer {

struct Ablation {
  bool use_ds = true;
  bool use_sc = true;
  bool use_ccf = true;

  /// "full", "no-ds", "no-sc", "no-ccf", or a '+'-joined list for other mixes.
  std::string name() const;
  bool operator==(const Ablation&) const = default;
};

/// The four rows of the ablation table: full model, then each module removed.
std::vector<Ablation> ablation_grid();

struct TrainConfig {
  int batch_size = 4;
  int epochs = 40;
  double learning_rate = 0.01;
  std::string optimizer = "adam";
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  bool cosine_decay = false;
  bool augment = true;
  std::uint64_t seed = 0;
  Ablation ablation;
  int eval_every = 0;  // 0: evaluate after the final epoch only
  std::filesystem::path checkpoint_dir;

  /// 300 epochs, as used for full-resolution runs.
  static TrainConfig full_scale();
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Model configuration with the ablation switches that live in the network applied.
model::ModelConfig apply_ablation(model::ModelConfig cfg, const Ablation& ablation);

class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : beta1_(beta1), beta2_(beta2), eps_(eps) {}
  /// One update of every parameter that holds a gradient.
  void step(model::ModelState& state, double lr);
  long steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> moments_;
};

struct StepLosses {
  double dice = 0.0;
  double bce = 0.0;
  double structural = 0.0;
  double total = 0.0;
  std::vector<degrade::DegradationKind> kinds;
};

/// Degrades each sample with its own draw from `sample_seeds`, runs one
/// forward/backward pass over the batch and applies one optimizer update.
/// Batch loss is the mean of per-sample losses. Throws TrainingError on a
/// non-finite loss.
StepLosses train_step(const std::vector<Image>& images, const std::vector<Mask>& masks, model::ModelState& state,
                      const model::ModelConfig& mcfg, const TrainConfig& tcfg, Adam& optimizer, double lr,
                      const std::vector<std::uint64_t>& sample_seeds);

struct EvalResult {
  std::vector<metrics::SliceCounts> slices;
  std::vector<metrics::MetricsRecord> patients;
  metrics::Summary summary;
};

/// Probability maps for each image (eval mode, degraded branch fed the source).
std::vector<Mask> predict_batch(model::ModelState& state, const model::ModelConfig& mcfg, const std::vector<Image>& images);

EvalResult evaluate(const std::vector<data::Sample>& samples, model::ModelState& state, const model::ModelConfig& mcfg,
                    metrics::Aggregation mode = metrics::Aggregation::Pooled);
/// Scores precomputed predictions (already binarized or probabilities; thresholded at 0.5).
EvalResult evaluate_predictions(const std::vector<data::Sample>& samples, const std::vector<Mask>& predictions,
                                metrics::Aggregation mode = metrics::Aggregation::Pooled);

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double dice_loss = 0.0;
  double bce_loss = 0.0;
  double structural_loss = 0.0;
  std::optional<metrics::Summary> test;
  std::array<long, 4> kind_counts{};  // degradation draws per kind this epoch
  double wall_seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;

  /// Compares everything except wall time.
  bool same_trajectory(const TrainLog& other) const;
  void write_csv(const std::filesystem::path& path) const;
  static TrainLog read_csv(const std::filesystem::path& path);
};

struct TrainResult {
  model::ModelState state;
  model::ModelConfig model_config;
  TrainLog log;
  EvalResult final_eval;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains from `init_state(mcfg, tcfg.seed)`; the final-epoch state is returned.
TrainResult train(const std::vector<data::Sample>& train_set, const std::vector<data::Sample>& test_set,
                  const model::ModelConfig& base_model, const TrainConfig& tcfg, const EpochCallback& on_epoch = {});

struct AblationRow {
  Ablation ablation;
  std::vector<std::uint64_t> seeds;
  std::vector<metrics::Summary> per_seed;
  // Medians over seeds of the patient-mean metrics.
  double iou = 0.0;
  double dice = 0.0;
  double recall = 0.0;
  double precision = 0.0;
};

double median(std::vector<double> v);

std::vector<AblationRow> run_ablation(const std::vector<Ablation>& grid, const std::vector<std::uint64_t>& seeds,
                                      const std::vector<data::Sample>& train_set, const std::vector<data::Sample>& test_set,
                                      const model::ModelConfig& base_model, const TrainConfig& base_train,
                                      const std::function<void(const std::string&)>& progress = {});

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);
std::vector<AblationRow> read_ablation_csv(const std::filesystem::path& path);

// Checkpoints: magic, JSON header (model config + shape manifest + names), raw little-endian doubles.
void save_checkpoint(const std::filesystem::path& path, const model::ModelState& state, const model::ModelConfig& cfg);
struct Checkpoint {
  model::ModelState state;
  model::ModelConfig config;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Loads and additionally requires the stored manifest to match `expected`'s.
Checkpoint load_checkpoint(const std::filesystem::path& path, const model::ModelConfig& expected);

}  // namespace tsn::trainer
