#include "tsn/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace tsn::metrics {

Mask binarize(const Mask& prob, double threshold) {
  Mask out(prob.height(), prob.width());
  for (std::size_t i = 0; i < prob.size(); ++i) out[i] = prob[i] >= threshold ? 1.0 : 0.0;
  return out;
}

ConfusionCounts confusion_counts(const Mask& pred_bin, const Mask& gt) {
  require_same_dims(pred_bin, gt, "confusion_counts");
  ConfusionCounts c;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const double p = pred_bin[i], g = gt[i];
    if ((p != 0.0 && p != 1.0) || (g != 0.0 && g != 1.0)) {
      throw std::invalid_argument("confusion_counts: non-binary value at pixel " + std::to_string(i));
    }
    if (p == 1.0) {
      (g == 1.0 ? c.tp : c.fp) += 1;
    } else {
      (g == 1.0 ? c.fn : c.tn) += 1;
    }
  }
  return c;
}

namespace {

// Both prediction and ground truth empty -> 1, exactly one empty -> 0.
double ratio_or_empty(double num, double den, bool both_empty) {
  if (den == 0.0) return both_empty ? 1.0 : 0.0;
  return num / den;
}

}  // namespace

MetricsRecord metrics_from_counts(std::int64_t tp, std::int64_t fp, std::int64_t fn) {
  if (tp < 0 || fp < 0 || fn < 0) throw std::invalid_argument("metrics_from_counts: negative count");
  const bool pred_empty = tp + fp == 0;
  const bool gt_empty = tp + fn == 0;
  const bool both_empty = pred_empty && gt_empty;
  const auto d = [](std::int64_t v) { return static_cast<double>(v); };
  MetricsRecord r;
  r.iou = ratio_or_empty(d(tp), d(tp + fp + fn), both_empty);
  r.dice = ratio_or_empty(2.0 * d(tp), d(2 * tp + fp + fn), both_empty);
  r.recall = ratio_or_empty(d(tp), d(tp + fn), both_empty);
  r.precision = ratio_or_empty(d(tp), d(tp + fp), both_empty);
  return r;
}

std::vector<MetricsRecord> patient_aggregate(const std::vector<SliceCounts>& slices, Aggregation mode) {
  if (slices.empty()) throw std::invalid_argument("patient_aggregate: no slices");
  std::vector<MetricsRecord> out;
  if (mode == Aggregation::Pooled) {
    std::map<std::string, ConfusionCounts> pooled;
    for (const auto& s : slices) pooled[s.patient_id] += s.counts;
    for (const auto& [id, counts] : pooled) {
      MetricsRecord r = metrics_from_counts(counts);
      r.patient_id = id;
      out.push_back(r);
    }
    return out;
  }
  std::map<std::string, std::pair<MetricsRecord, int>> sums;
  for (const auto& s : slices) {
    const MetricsRecord m = metrics_from_counts(s.counts);
    auto& [acc, count] = sums[s.patient_id];
    acc.iou += m.iou;
    acc.dice += m.dice;
    acc.recall += m.recall;
    acc.precision += m.precision;
    ++count;
  }
  for (auto& [id, entry] : sums) {
    auto [acc, count] = entry;
    acc.patient_id = id;
    acc.iou /= count;
    acc.dice /= count;
    acc.recall /= count;
    acc.precision /= count;
    out.push_back(acc);
  }
  return out;
}

namespace {

MeanStd mean_std(const std::vector<MetricsRecord>& records, double MetricsRecord::*field) {
  MeanStd ms;
  if (records.empty()) return ms;
  for (const auto& r : records) ms.mean += r.*field;
  ms.mean /= static_cast<double>(records.size());
  double acc = 0.0;
  for (const auto& r : records) acc += (r.*field - ms.mean) * (r.*field - ms.mean);
  ms.std = std::sqrt(acc / static_cast<double>(records.size()));
  return ms;
}

}  // namespace

Summary summarize(const std::vector<MetricsRecord>& records) {
  Summary s;
  s.iou = mean_std(records, &MetricsRecord::iou);
  s.dice = mean_std(records, &MetricsRecord::dice);
  s.recall = mean_std(records, &MetricsRecord::recall);
  s.precision = mean_std(records, &MetricsRecord::precision);
  s.patients = records.size();
  return s;
}

std::string format_mean_std(const MeanStd& v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f±%.2f", v.mean * 100.0, v.std * 100.0);
  return buf;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRecord>& records) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "patient_id,iou,dice,recall,precision\n";
  char buf[256];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g,%.17g\n", r.patient_id.c_str(), r.iou, r.dice,
                  r.recall, r.precision);
    out << buf;
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "patient_id,iou,dice,recall,precision") {
    throw IoError("unexpected metrics header in " + path.string());
  }
  std::vector<MetricsRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    MetricsRecord r;
    std::string field;
    std::getline(ss, r.patient_id, ',');
    double* targets[] = {&r.iou, &r.dice, &r.recall, &r.precision};
    for (double* t : targets) {
      if (!std::getline(ss, field, ',')) throw IoError("truncated metrics row in " + path.string());
      *t = std::stod(field);
    }
    out.push_back(r);
  }
  return out;
}

std::string summary_json(const Summary& s) {
  nlohmann::ordered_json j;
  const auto put = [&](const char* name, const MeanStd& v) {
    j[name] = {{"mean", v.mean}, {"std", v.std}, {"formatted", format_mean_std(v)}};
  };
  put("iou", s.iou);
  put("dice", s.dice);
  put("recall", s.recall);
  put("precision", s.precision);
  j["patients"] = s.patients;
  return j.dump(2);
}

}  // namespace tsn::metrics
