#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "pva/loss.hpp"
#include "pva/metrics.hpp"
#include "pva/rng.hpp"
#include "pva/synth.hpp"
#include "pva/volume.hpp"

using namespace pva;

namespace {

// Triple-loop reference metrics, written independently of the library path.
struct OracleSc {
  double precision, recall, iou;
};

OracleSc oracle_sc(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt,
                   const std::vector<VoxelKind>& kinds) {
  int64_t tp = 0, fp = 0, fn = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (kinds[i] != VoxelKind::Occluded) continue;
    const bool p = pred[i] != 0, g = gt[i] != 0;
    tp += p && g;
    fp += p && !g;
    fn += !p && g;
  }
  OracleSc o{};
  o.precision = (tp + fp) ? double(tp) / double(tp + fp) : (fn == 0 ? 1.0 : 0.0);
  o.recall = (tp + fn) ? double(tp) / double(tp + fn) : (fp == 0 ? 1.0 : 0.0);
  o.iou = (tp + fp + fn) ? double(tp) / double(tp + fp + fn) : 1.0;
  return o;
}

double oracle_miou(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt,
                   const std::vector<VoxelKind>& kinds, int classes,
                   std::vector<double>* per_class = nullptr) {
  double sum = 0;
  int present = 0;
  for (int c = 1; c <= classes; ++c) {
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
      if (kinds[i] == VoxelKind::VisibleEmpty) continue;
      const bool p = pred[i] == c, g = gt[i] == c;
      inter += p && g;
      uni += p || g;
    }
    const double iou = uni ? double(inter) / double(uni) : 0.0;
    if (per_class) per_class->push_back(uni ? iou : 0.0);
    if (uni) {
      sum += iou;
      ++present;
    }
  }
  return present ? sum / present : 0.0;
}

std::vector<VoxelKind> random_kinds(int64_t n, Rng& rng) {
  std::vector<VoxelKind> k(static_cast<size_t>(n));
  for (auto& v : k) v = static_cast<VoxelKind>(rng.below(3));
  return k;
}

std::vector<uint8_t> random_labels(int64_t n, Rng& rng, int classes) {
  std::vector<uint8_t> l(static_cast<size_t>(n));
  for (auto& v : l) v = static_cast<uint8_t>(rng.below(static_cast<uint64_t>(classes) + 1));
  return l;
}

}  // namespace

TEST_CASE("ssc_loss fixed points") {
  Tape tape;
  Tensor uniform({3, 12});
  std::vector<uint8_t> labels = {0, 5, 11};
  CHECK(ssc_loss(tape, uniform, labels).item() ==
        doctest::Approx(std::log(12.0)).epsilon(1e-12));

  Tensor sharp = Tensor::full({2, 12}, -20.0);
  std::vector<uint8_t> l2 = {4, 9};
  for (int64_t i = 0; i < 2; ++i) sharp.data()[i * 12 + l2[static_cast<size_t>(i)]] = 20.0;
  CHECK(ssc_loss(tape, sharp, l2).item() ==
        doctest::Approx(std::log1p(11.0 * std::exp(-40.0))).epsilon(1e-9));
  CHECK(ssc_loss(tape, sharp, l2).item() < 1e-8);

  std::vector<uint8_t> bad = {200, 0};
  CHECK_THROWS_AS(ssc_loss(tape, sharp, bad), IndexError);
}

TEST_CASE("ssc_loss equals the full-volume masked evaluation") {
  // Brute-force evaluation of the masked voxel-space loss: iterate every
  // voxel, recompute the mask from kinds, average cross-entropy over valid
  // voxels. Point generation makes the mask structural, so both routes agree.
  Rng rng(17);
  const TsdfVolume v = record_from_seed({12, 8, 12}, 5);
  const PointCloud cloud = generate_points(v);
  REQUIRE(cloud.size() > 0);
  Tensor logits({cloud.size(), 12});
  for (int64_t i = 0; i < logits.numel(); ++i) logits.data()[i] = rng.uniform(-2.0, 2.0);

  Tape tape;
  const double via_points = ssc_loss(tape, logits, cloud.label).item();

  // full-volume oracle
  std::vector<int64_t> voxel_to_point(static_cast<size_t>(v.dims.count()), -1);
  for (int64_t i = 0; i < cloud.size(); ++i)
    voxel_to_point[static_cast<size_t>(cloud.src_voxel[static_cast<size_t>(i)])] = i;
  double total = 0;
  int64_t valid = 0;
  for (int64_t idx = 0; idx < v.dims.count(); ++idx) {
    const int m = v.kind[static_cast<size_t>(idx)] != VoxelKind::VisibleEmpty ? 1 : 0;
    if (!m) continue;
    const int64_t p = voxel_to_point[static_cast<size_t>(idx)];
    REQUIRE(p >= 0);
    const double* row = logits.data() + p * 12;
    double mx = row[0];
    for (int c = 1; c < 12; ++c) mx = std::max(mx, row[c]);
    double sum = 0;
    for (int c = 0; c < 12; ++c) sum += std::exp(row[c] - mx);
    total += mx + std::log(sum) - row[v.label[static_cast<size_t>(idx)]];
    ++valid;
  }
  CHECK(via_points == doctest::Approx(total / valid).epsilon(1e-12));
}

TEST_CASE("sp_loss fixed points and hand case") {
  Tape tape;
  Tensor half({4, 1});
  for (int64_t i = 0; i < 4; ++i) half.data()[i] = 0.5;
  std::vector<double> g = {1, 0, 1, 0};
  CHECK(sp_loss(tape, half, g).value.item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Tensor perfect({2, 1});
  perfect.data()[0] = 1.0;
  perfect.data()[1] = 0.0;
  std::vector<double> gp = {1, 0};
  CHECK(sp_loss(tape, perfect, gp).value.item() < 2e-7);

  Tensor two({2, 1});
  two.data()[0] = 0.9;
  two.data()[1] = 0.2;
  std::vector<double> gt = {1, 0};
  CHECK(sp_loss(tape, two, gt).value.item() ==
        doctest::Approx((-std::log(0.9) - std::log(0.8)) / 2.0).epsilon(1e-9));
  CHECK(sp_loss(tape, two, gt).value.item() == doctest::Approx(0.1643).epsilon(1e-3));

  const SpLossResult empty = sp_loss(tape, Tensor(), {});
  CHECK(empty.empty_pairs);
  CHECK(empty.value.item() == 0.0);
}

TEST_CASE("sp_loss decreases as a weight moves toward its target") {
  std::vector<double> g = {1.0};
  double prev = 1e30;
  for (double w = 0.05; w < 1.0; w += 0.05) {
    Tape tape;
    Tensor t({1, 1});
    t.data()[0] = w;
    const double loss = sp_loss(tape, t, g).value.item();
    CHECK(loss < prev);
    prev = loss;
  }
}

TEST_CASE("total_loss combines per the balancing factor") {
  Tape tape;
  Tensor ssc = Tensor::scalar(2.0);
  SpLossResult sp;
  sp.value = Tensor::scalar(0.5);
  CHECK(total_loss(tape, ssc, sp, 0.5).item() == doctest::Approx(2.25).epsilon(1e-15));
  CHECK(total_loss(tape, ssc, sp, 0.0).item() == doctest::Approx(2.0).epsilon(1e-15));

  // gradient reaches both terms when lambda > 0
  Tensor a = Tensor::scalar(2.0);
  SpLossResult b;
  b.value = Tensor::scalar(0.5);
  Tape tg;
  Tensor tot = total_loss(tg, a, b, 0.5);
  tg.backward(tot);
  CHECK(a.grad()[0] == 1.0);
  CHECK(b.value.grad()[0] == 0.5);
}

TEST_CASE("scene completion metrics hand cases") {
  // occluded cells {A,B,C}: pred nonempty {A,B}, gt nonempty {B,C}
  std::vector<uint8_t> pred = {1, 1, 0};
  std::vector<uint8_t> gt = {0, 2, 3};
  std::vector<VoxelKind> kinds(3, VoxelKind::Occluded);
  const ScMetrics m = scene_completion_metrics(pred, gt, kinds);
  CHECK(m.precision == doctest::Approx(0.5));
  CHECK(m.recall == doctest::Approx(0.5));
  CHECK(m.iou == doctest::Approx(1.0 / 3.0));

  // perfect prediction
  const ScMetrics perfect = scene_completion_metrics(gt, gt, kinds);
  CHECK(perfect.precision == 1.0);
  CHECK(perfect.recall == 1.0);
  CHECK(perfect.iou == 1.0);

  // observed-surface voxels never affect SC metrics
  std::vector<uint8_t> pred2 = pred;
  std::vector<uint8_t> gt2 = gt;
  pred2.push_back(7);
  gt2.push_back(1);
  std::vector<VoxelKind> kinds2 = kinds;
  kinds2.push_back(VoxelKind::ObservedSurface);
  const ScMetrics m2 = scene_completion_metrics(pred2, gt2, kinds2);
  CHECK(m2.precision == m.precision);
  CHECK(m2.recall == m.recall);
  CHECK(m2.iou == m.iou);

  CHECK_THROWS_AS(scene_completion_metrics(pred, gt2, kinds), DimensionError);
}

TEST_CASE("sc edge rules for empty denominators") {
  std::vector<VoxelKind> kinds(2, VoxelKind::Occluded);
  const std::vector<uint8_t> none = {0, 0};
  const std::vector<uint8_t> some = {1, 0};
  // nothing predicted, nothing to find: perfect
  const ScMetrics both = scene_completion_metrics(none, none, kinds);
  CHECK(both.precision == 1.0);
  CHECK(both.recall == 1.0);
  CHECK(both.iou == 1.0);
  // nothing predicted but something was there
  const ScMetrics missed = scene_completion_metrics(none, some, kinds);
  CHECK(missed.precision == 0.0);
  CHECK(missed.recall == 0.0);
  CHECK(missed.iou == 0.0);
}

TEST_CASE("ssc metrics hand case") {
  // 2-voxel region, gt (1,2), pred (1,1)
  std::vector<uint8_t> pred = {1, 1};
  std::vector<uint8_t> gt = {1, 2};
  std::vector<VoxelKind> kinds = {VoxelKind::ObservedSurface, VoxelKind::Occluded};
  const SscMetrics m = ssc_metrics(pred, gt, kinds, 4);
  CHECK(m.per_class_iou[0] == doctest::Approx(0.5));  // class 1: inter 1, union 2
  CHECK(m.per_class_iou[1] == doctest::Approx(0.0));  // class 2: inter 0, union 2
  CHECK(m.class_present[0] == 1);
  CHECK(m.class_present[1] == 1);
  CHECK(m.class_present[2] == 0);  // classes 3,4 absent: excluded from the mean
  CHECK(m.miou == doctest::Approx(0.25));

  // perfect prediction with every class present
  std::vector<uint8_t> all = {1, 2, 3, 4};
  std::vector<VoxelKind> k4(4, VoxelKind::Occluded);
  CHECK(ssc_metrics(all, all, k4, 4).miou == 1.0);
}

TEST_CASE("visible-empty voxels never affect either protocol") {
  Rng rng(23);
  const int64_t n = 6 * 4 * 6;
  std::vector<uint8_t> pred = random_labels(n, rng, 11);
  std::vector<uint8_t> gt = random_labels(n, rng, 11);
  std::vector<VoxelKind> kinds = random_kinds(n, rng);
  const ScMetrics sc0 = scene_completion_metrics(pred, gt, kinds);
  const SscMetrics ssc0 = ssc_metrics(pred, gt, kinds, 11);
  std::vector<uint8_t> pred2 = pred;
  std::vector<uint8_t> gt2 = gt;
  for (size_t i = 0; i < kinds.size(); ++i) {
    if (kinds[i] == VoxelKind::VisibleEmpty) {
      pred2[i] = static_cast<uint8_t>(rng.below(12));
      gt2[i] = static_cast<uint8_t>(rng.below(12));
    }
  }
  const ScMetrics sc1 = scene_completion_metrics(pred2, gt2, kinds);
  const SscMetrics ssc1 = ssc_metrics(pred2, gt2, kinds, 11);
  CHECK(sc0.iou == sc1.iou);
  CHECK(ssc0.miou == ssc1.miou);
}

TEST_CASE("metrics match the triple-loop oracle on 50 random volumes") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const int64_t n = 6 * 4 * 6;
    const std::vector<uint8_t> pred = random_labels(n, rng, 11);
    const std::vector<uint8_t> gt = random_labels(n, rng, 11);
    const std::vector<VoxelKind> kinds = random_kinds(n, rng);

    const ScMetrics sc = scene_completion_metrics(pred, gt, kinds);
    const OracleSc ref = oracle_sc(pred, gt, kinds);
    CHECK(sc.precision == ref.precision);
    CHECK(sc.recall == ref.recall);
    CHECK(sc.iou == ref.iou);

    const SscMetrics ssc = ssc_metrics(pred, gt, kinds, 11);
    std::vector<double> per_class;
    const double miou = oracle_miou(pred, gt, kinds, 11, &per_class);
    CHECK(ssc.miou == miou);
    for (int c = 0; c < 11; ++c)
      CHECK(ssc.per_class_iou[static_cast<size_t>(c)] == per_class[static_cast<size_t>(c)]);

    // 0 <= IoU <= min(precision, recall) <= 1 whenever defined
    CHECK(sc.iou >= 0.0);
    CHECK(sc.iou <= std::min(sc.precision, sc.recall) + 1e-15);
    CHECK(std::max(sc.precision, sc.recall) <= 1.0);
  }
}

TEST_CASE("report aggregation pools counts, not ratios") {
  Rng rng(37);
  ScCounts sc_acc;
  SscCounts ssc_acc(11);
  int64_t tp = 0, fp = 0, fn = 0;
  for (int scene = 0; scene < 5; ++scene) {
    const int64_t n = 6 * 4 * 6;
    const std::vector<uint8_t> pred = random_labels(n, rng, 11);
    const std::vector<uint8_t> gt = random_labels(n, rng, 11);
    const std::vector<VoxelKind> kinds = random_kinds(n, rng);
    const ScCounts c = sc_count(pred, gt, kinds);
    tp += c.tp;
    fp += c.fp;
    fn += c.fn;
    sc_acc.add(c);
    ssc_acc.add(ssc_count(pred, gt, kinds, 11));
  }
  const EvalReport r = finalize_report(sc_acc, ssc_acc);
  CHECK(r.sc_iou == doctest::Approx(double(tp) / double(tp + fp + fn)));
  CHECK(r.per_class_iou.size() == 11);
  double mean = 0;
  int present = 0;
  for (size_t c = 0; c < 11; ++c)
    if (r.class_present[c]) {
      mean += r.per_class_iou[c];
      ++present;
    }
  CHECK(r.ssc_miou == doctest::Approx(mean / present));
}

TEST_CASE("ssc_loss is permutation invariant over points") {
  Rng rng(41);
  const int64_t n = 32;
  Tensor logits({n, 12});
  std::vector<uint8_t> labels(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) labels[static_cast<size_t>(i)] = static_cast<uint8_t>(rng.below(12));
  for (int64_t i = 0; i < logits.numel(); ++i) logits.data()[i] = rng.uniform(-1, 1);

  Tape t1;
  const double base = ssc_loss(t1, logits, labels).item();

  Tensor perm({n, 12});
  std::vector<uint8_t> plabels(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const int64_t j = n - 1 - i;
    plabels[static_cast<size_t>(i)] = labels[static_cast<size_t>(j)];
    for (int c = 0; c < 12; ++c) perm.data()[i * 12 + c] = logits.data()[j * 12 + c];
  }
  Tape tp;
  CHECK(ssc_loss(tp, perm, plabels).item() == doctest::Approx(base).epsilon(1e-15));
}
