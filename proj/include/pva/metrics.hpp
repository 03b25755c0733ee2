#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pva/volume.hpp"

namespace pva {

// Binary completion counts over occluded voxels (all non-empty classes
// collapse to "occupied").
struct ScCounts {
  int64_t tp = 0, fp = 0, fn = 0;

  void add(const ScCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
  }
};

// Per-class intersection/union counts over the observed-surface and
// occluded region.
struct SscCounts {
  std::vector<int64_t> intersection;
  std::vector<int64_t> unions;

  explicit SscCounts(int class_count = 0)
      : intersection(static_cast<size_t>(class_count), 0),
        unions(static_cast<size_t>(class_count), 0) {}
  void add(const SscCounts& o);
};

struct EvalReport {
  double sc_precision = 0.0;
  double sc_recall = 0.0;
  double sc_iou = 0.0;
  std::vector<double> per_class_iou;
  std::vector<uint8_t> class_present;  // class seen in pred or gt within the region
  double ssc_miou = 0.0;

  std::string to_string() const;
};

ScCounts sc_count(std::span<const uint8_t> pred, std::span<const uint8_t> gt,
                  std::span<const VoxelKind> kinds);

SscCounts ssc_count(std::span<const uint8_t> pred, std::span<const uint8_t> gt,
                    std::span<const VoxelKind> kinds, int class_count);

// Ratios from aggregated counts. Empty denominators: a metric whose
// denominator is zero is 1 when the situation is perfect (nothing predicted
// and nothing to find) and 0 otherwise.
double sc_precision(const ScCounts& c);
double sc_recall(const ScCounts& c);
double sc_iou(const ScCounts& c);

EvalReport finalize_report(const ScCounts& sc, const SscCounts& ssc);

// Per-volume convenience forms of the two evaluation protocols.
struct ScMetrics {
  double precision = 0.0, recall = 0.0, iou = 0.0;
};
ScMetrics scene_completion_metrics(std::span<const uint8_t> pred,
                                   std::span<const uint8_t> gt,
                                   std::span<const VoxelKind> kinds);

struct SscMetrics {
  std::vector<double> per_class_iou;
  std::vector<uint8_t> class_present;
  double miou = 0.0;
};
SscMetrics ssc_metrics(std::span<const uint8_t> pred, std::span<const uint8_t> gt,
                       std::span<const VoxelKind> kinds, int class_count);

}  // namespace pva
