#include "tsn/run_config.hpp"

#include <fstream>
#include <set>

#include "tsn/error.hpp"

namespace tsn {

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ValidationError(where + ": unknown key '" + key + "'");
  }
}

template <class T>
nlohmann::ordered_json ordered(const T& v) {
  return nlohmann::ordered_json::parse(nlohmann::json(v).dump());
}

}  // namespace

std::string to_string(metrics::Aggregation a) { return a == metrics::Aggregation::Pooled ? "pooled" : "slice-mean"; }

metrics::Aggregation parse_aggregation(const std::string& s) {
  if (s == "pooled") return metrics::Aggregation::Pooled;
  if (s == "slice-mean") return metrics::Aggregation::SliceMean;
  throw ValidationError("aggregation must be 'pooled' or 'slice-mean', got '" + s + "'");
}

void RunConfig::validate() const {
  phantom.validate();
  model.validate();
  train.validate();
  if (dataset.patients < 2) throw ValidationError("dataset.patients must be at least 2");
  if (dataset.slices < 1) throw ValidationError("dataset.slices must be positive");
  if (!(dataset.test_fraction > 0.0 && dataset.test_fraction < 1.0)) {
    throw ValidationError("dataset.test_fraction must lie in (0, 1)");
  }
  if (phantom.height != model.input_h || phantom.width != model.input_w) {
    throw ValidationError("phantom size " + std::to_string(phantom.height) + "x" + std::to_string(phantom.width) +
                          " does not match model input " + std::to_string(model.input_h) + "x" +
                          std::to_string(model.input_w));
  }
  if (model.use_ccf != train.ablation.use_ccf) {
    throw ValidationError("model.use_ccf and train.use_ccf disagree");
  }
  if (model.use_ds_branch != train.ablation.use_ds) {
    throw ValidationError("model.use_ds_branch and train.use_ds disagree");
  }
}

nlohmann::ordered_json RunConfig::to_json() const {
  nlohmann::ordered_json j;
  j["phantom"] = ordered(phantom);
  j["dataset"] = {{"patients", dataset.patients}, {"slices", dataset.slices}, {"test_fraction", dataset.test_fraction}};
  j["model"] = ordered(model);
  j["train"] = ordered(train);
  j["eval"] = {{"aggregation", to_string(aggregation)}};
  j["paths"] = {{"data", data_dir.string()}, {"out", out_dir.string()}};
  return j;
}

void RunConfig::merge(const nlohmann::json& j) {
  reject_unknown(j, {"phantom", "dataset", "model", "train", "eval", "paths"}, "config");
  try {
    if (j.contains("phantom")) data::from_json(j.at("phantom"), phantom);
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      reject_unknown(d, {"patients", "slices", "test_fraction"}, "dataset");
      dataset.patients = d.value("patients", dataset.patients);
      dataset.slices = d.value("slices", dataset.slices);
      dataset.test_fraction = d.value("test_fraction", dataset.test_fraction);
    }
    if (j.contains("model")) model::from_json(j.at("model"), model);
    if (j.contains("train")) {
      const auto& t = j.at("train");
      trainer::from_json(t, train);
      // The ablation switches in the train section drive the network flags.
      if (t.contains("use_ccf") || t.contains("use_ds")) model = trainer::apply_ablation(model, train.ablation);
    }
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      reject_unknown(e, {"aggregation"}, "eval");
      if (e.contains("aggregation")) aggregation = parse_aggregation(e.at("aggregation").get<std::string>());
    }
    if (j.contains("paths")) {
      const auto& p = j.at("paths");
      reject_unknown(p, {"data", "out"}, "paths");
      data_dir = p.value("data", data_dir.string());
      out_dir = p.value("out", out_dir.string());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  RunConfig cfg;
  cfg.merge(j);
  return cfg;
}

}  // namespace tsn
