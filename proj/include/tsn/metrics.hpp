#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tsn/image.hpp"

namespace tsn::metrics {

struct ConfusionCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  std::int64_t tn = 0;

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

struct MetricsRecord {
  std::string patient_id;
  double iou = 0.0;
  double dice = 0.0;
  double recall = 0.0;
  double precision = 0.0;
};

/// Thresholds a probability map (p >= threshold -> 1).
Mask binarize(const Mask& prob, double threshold = 0.5);

/// Exact pixel counts. Both inputs must be strictly binary.
ConfusionCounts confusion_counts(const Mask& pred_bin, const Mask& gt);

/// IoU, Dice, Recall and Precision. A metric whose denominator is empty is 1
/// when prediction and ground truth are both empty and 0 otherwise.
MetricsRecord metrics_from_counts(std::int64_t tp, std::int64_t fp, std::int64_t fn);
inline MetricsRecord metrics_from_counts(const ConfusionCounts& c) {
  return metrics_from_counts(c.tp, c.fp, c.fn);
}

struct SliceCounts {
  std::string patient_id;
  ConfusionCounts counts;
};

enum class Aggregation {
  Pooled,     // sum counts over a patient's slices, then compute metrics once
  SliceMean,  // compute per-slice metrics, then average them per patient
};

/// One record per patient, ordered by patient id.
std::vector<MetricsRecord> patient_aggregate(const std::vector<SliceCounts>& slices,
                                             Aggregation mode = Aggregation::Pooled);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
};

struct Summary {
  MeanStd iou;
  MeanStd dice;
  MeanStd recall;
  MeanStd precision;
  std::size_t patients = 0;
};

Summary summarize(const std::vector<MetricsRecord>& records);

/// "82.24±6.38" style, values expressed in percent.
std::string format_mean_std(const MeanStd& v);

/// patient_id,iou,dice,recall,precision
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRecord>& records);
std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path);

std::string summary_json(const Summary& s);

}  // namespace tsn::metrics
