#pragma once

// Single serializable description of a run: phantom data, model, training and paths.

#include <filesystem>
#include <string>

#include "json.hpp"
#include "tsn/data.hpp"
#include "tsn/metrics.hpp"
#include "tsn/model.hpp"
#include "tsn/trainer.hpp"

namespace tsn {

struct DatasetShape {
  int patients = 40;
  int slices = 5;
  double test_fraction = 0.1;
};

struct RunConfig {
  data::PhantomSpec phantom;
  DatasetShape dataset;
  model::ModelConfig model = model::ModelConfig::toy();
  trainer::TrainConfig train;
  metrics::Aggregation aggregation = metrics::Aggregation::Pooled;
  std::filesystem::path data_dir;
  std::filesystem::path out_dir;

  /// Cross-field checks; throws ValidationError.
  void validate() const;
  nlohmann::ordered_json to_json() const;
  /// Overlays `j` on the current values. Unknown keys at any level are rejected.
  void merge(const nlohmann::json& j);
  static RunConfig from_file(const std::filesystem::path& path);
};

std::string to_string(metrics::Aggregation a);
metrics::Aggregation parse_aggregation(const std::string& s);

}  // namespace tsn
