#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>

#include "pva/metrics.hpp"
#include "pva/network.hpp"
#include "pva/synth.hpp"

namespace pva {

struct TrainConfig {
  double lr0 = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double poly_power = 0.9;
  int epochs = 100;
  int batch_size = 4;          // paper-scale value is 8
  double lambda = 0.5;
  int observed_samples = 512;  // paper-scale value is 2048
  int occluded_samples = 2048; // paper-scale value is 8192
  uint64_t seed = 1;

  void validate() const;
};

// lr0 * (1 - iter/max_iter)^poly_power
double poly_lr(int64_t iter, int64_t max_iter, const TrainConfig& cfg);

// Heavy-ball SGD with decoupled-from-nothing weight decay folded into the
// gradient: g' = g + wd*theta; v = mu*v + g'; theta -= lr*v. Gradients are
// cleared afterwards.
void sgd_step(std::vector<Parameter>& params, double lr, const TrainConfig& cfg);

struct BatchSample {
  std::vector<int64_t> indices;  // observed draws first, then occluded
  bool stratum_warning = false;  // one stratum was empty; quota refilled
};

// Stratified fixed-count sampling: observed_samples observed points and
// occluded_samples occluded points, drawing with replacement when a stratum
// is smaller than its quota.
BatchSample sample_batch(const PointCloud& cloud, const TrainConfig& cfg, Rng& rng);

struct TrainOptions {
  std::filesystem::path checkpoint_out;  // empty: no checkpoint written
  std::ostream* log = nullptr;           // metrics log; content is deterministic
  int eval_every = 0;                    // epochs between val-split reports (0 = never)
  // Called after each epoch; return true to stop early.
  std::function<bool(int epoch, PvaModel& model)> epoch_hook;
};

PvaModel train(const Manifest& manifest, const TrainConfig& tc, const PvaConfig& pc,
               const TrainOptions& opts = {});

EvalReport evaluate_volumes(std::span<const TsdfVolume> volumes, const PvaModel& model);

EvalReport evaluate(const Manifest& manifest, const std::string& split,
                    const PvaModel& model);

// Per-scene inference: full-cloud forward, predictions voxelized back.
std::vector<uint8_t> infer_labels(const TsdfVolume& v, const PvaModel& model);

// --- analytic operation-count report ---------------------------------------

struct SceneStats {
  GridDims dims{};
  int64_t point_count = 0;
  double avg_sa_neighbors = 16.0;     // before capping
  double avg_voxel_neighbors = 5.0;   // per ellipsoid/ball, before capping
};

struct OpsReportEntry {
  std::string stage;
  int64_t macs = 0;
};

struct OpsReport {
  std::vector<OpsReportEntry> entries;
  int64_t total() const;
  std::string to_string() const;
};

// Multiply-accumulate estimate per stage from shapes and average
// neighborhood sizes. Linear in point count while the configured sample
// counts do not clamp.
OpsReport ops_report(const PvaConfig& pc, const SceneStats& stats);

}  // namespace pva
