#include "pva/metrics.hpp"

#include <sstream>

namespace pva {

namespace {

void check_sizes(size_t pred, size_t gt, size_t kinds) {
  if (pred != gt || pred != kinds)
    throw DimensionError("metric inputs disagree: pred " + std::to_string(pred) + ", gt " +
                         std::to_string(gt) + ", kinds " + std::to_string(kinds));
}

}  // namespace

void SscCounts::add(const SscCounts& o) {
  if (intersection.size() != o.intersection.size())
    throw DimensionError("SscCounts class counts disagree");
  for (size_t c = 0; c < intersection.size(); ++c) {
    intersection[c] += o.intersection[c];
    unions[c] += o.unions[c];
  }
}

ScCounts sc_count(std::span<const uint8_t> pred, std::span<const uint8_t> gt,
                  std::span<const VoxelKind> kinds) {
  check_sizes(pred.size(), gt.size(), kinds.size());
  ScCounts c;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (kinds[i] != VoxelKind::Occluded) continue;
    const bool p = pred[i] != 0;
    const bool g = gt[i] != 0;
    if (p && g) ++c.tp;
    else if (p && !g) ++c.fp;
    else if (!p && g) ++c.fn;
  }
  return c;
}

SscCounts ssc_count(std::span<const uint8_t> pred, std::span<const uint8_t> gt,
                    std::span<const VoxelKind> kinds, int class_count) {
  check_sizes(pred.size(), gt.size(), kinds.size());
  SscCounts c(class_count);
  for (size_t i = 0; i < pred.size(); ++i) {
    if (kinds[i] == VoxelKind::VisibleEmpty) continue;
    for (int cls = 1; cls <= class_count; ++cls) {
      const bool p = pred[i] == cls;
      const bool g = gt[i] == cls;
      if (p && g) ++c.intersection[static_cast<size_t>(cls - 1)];
      if (p || g) ++c.unions[static_cast<size_t>(cls - 1)];
    }
  }
  return c;
}

double sc_precision(const ScCounts& c) {
  if (c.tp + c.fp == 0) return c.fn == 0 ? 1.0 : 0.0;
  return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
}

double sc_recall(const ScCounts& c) {
  if (c.tp + c.fn == 0) return c.fp == 0 ? 1.0 : 0.0;
  return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

double sc_iou(const ScCounts& c) {
  if (c.tp + c.fp + c.fn == 0) return 1.0;
  return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp + c.fn);
}

EvalReport finalize_report(const ScCounts& sc, const SscCounts& ssc) {
  EvalReport r;
  r.sc_precision = sc_precision(sc);
  r.sc_recall = sc_recall(sc);
  r.sc_iou = sc_iou(sc);
  const size_t classes = ssc.intersection.size();
  r.per_class_iou.assign(classes, 0.0);
  r.class_present.assign(classes, 0);
  double sum = 0.0;
  int present = 0;
  for (size_t c = 0; c < classes; ++c) {
    if (ssc.unions[c] == 0) continue;  // absent from both pred and gt: excluded
    r.class_present[c] = 1;
    r.per_class_iou[c] =
        static_cast<double>(ssc.intersection[c]) / static_cast<double>(ssc.unions[c]);
    sum += r.per_class_iou[c];
    ++present;
  }
  r.ssc_miou = present > 0 ? sum / present : 0.0;
  return r;
}

ScMetrics scene_completion_metrics(std::span<const uint8_t> pred,
                                   std::span<const uint8_t> gt,
                                   std::span<const VoxelKind> kinds) {
  const ScCounts c = sc_count(pred, gt, kinds);
  return {sc_precision(c), sc_recall(c), sc_iou(c)};
}

SscMetrics ssc_metrics(std::span<const uint8_t> pred, std::span<const uint8_t> gt,
                       std::span<const VoxelKind> kinds, int class_count) {
  const SscCounts c = ssc_count(pred, gt, kinds, class_count);
  const EvalReport r = finalize_report(ScCounts{}, c);
  return {r.per_class_iou, r.class_present, r.ssc_miou};
}

std::string EvalReport::to_string() const {
  std::ostringstream os;
  os << "sc_precision " << sc_precision << " sc_recall " << sc_recall << " sc_iou "
     << sc_iou << " ssc_miou " << ssc_miou << " per_class";
  for (size_t c = 0; c < per_class_iou.size(); ++c) {
    os << ' ';
    if (class_present[c]) os << per_class_iou[c];
    else os << '-';
  }
  return os.str();
}

}  // namespace pva
