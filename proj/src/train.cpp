#include "pva/train.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <sstream>

#include "pva/checkpoint.hpp"
#include "pva/loss.hpp"

namespace pva {

void TrainConfig::validate() const {
  if (!(lr0 > 0)) throw ValueError("lr0 must be positive");
  if (momentum < 0 || momentum >= 1) throw ValueError("momentum must be in [0,1)");
  if (weight_decay < 0) throw ValueError("weight_decay must be non-negative");
  if (!(poly_power > 0)) throw ValueError("poly_power must be positive");
  if (epochs < 1) throw ValueError("epochs must be positive");
  if (batch_size < 1) throw ValueError("batch_size must be positive");
  if (lambda < 0) throw ValueError("lambda must be non-negative");
  if (observed_samples < 1 || occluded_samples < 1)
    throw ValueError("sample quotas must be positive");
}

double poly_lr(int64_t iter, int64_t max_iter, const TrainConfig& cfg) {
  if (max_iter < 1) throw ValueError("poly schedule needs max_iter >= 1");
  if (iter < 0 || iter > max_iter)
    throw ValueError("poly schedule iteration " + std::to_string(iter) + " outside [0," +
                     std::to_string(max_iter) + "]");
  const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(max_iter);
  return cfg.lr0 * std::pow(frac, cfg.poly_power);
}

void sgd_step(std::vector<Parameter>& params, double lr, const TrainConfig& cfg) {
  for (Parameter& p : params) {
    double* g = p.tensor.grad();
    if (!g) throw ValueError("optimizer: parameter '" + p.name + "' has no gradient");
    double* theta = p.tensor.data();
    const int64_t n = p.tensor.numel();
    for (int64_t i = 0; i < n; ++i) {
      const double adj = g[i] + cfg.weight_decay * theta[i];
      p.momentum[static_cast<size_t>(i)] = cfg.momentum * p.momentum[static_cast<size_t>(i)] + adj;
      theta[i] -= lr * p.momentum[static_cast<size_t>(i)];
    }
    p.tensor.zero_grad();
  }
}

BatchSample sample_batch(const PointCloud& cloud, const TrainConfig& cfg, Rng& rng) {
  if (cloud.size() == 0) throw ValueError("sample_batch on an empty cloud");
  std::vector<int64_t> observed, occluded;
  for (int64_t i = 0; i < cloud.size(); ++i) {
    if (cloud.kind[static_cast<size_t>(i)] == VoxelKind::ObservedSurface)
      observed.push_back(i);
    else
      occluded.push_back(i);
  }

  BatchSample out;
  auto draw = [&](const std::vector<int64_t>& stratum, int quota) {
    if (static_cast<int>(stratum.size()) >= quota) {
      // Without replacement: partial Fisher-Yates over a copy.
      std::vector<int64_t> pool = stratum;
      for (int i = 0; i < quota; ++i) {
        const size_t j =
            static_cast<size_t>(i) + rng.below(pool.size() - static_cast<size_t>(i));
        std::swap(pool[static_cast<size_t>(i)], pool[j]);
        out.indices.push_back(pool[static_cast<size_t>(i)]);
      }
    } else {
      for (int i = 0; i < quota; ++i)
        out.indices.push_back(stratum[rng.below(stratum.size())]);
    }
  };

  if (observed.empty() || occluded.empty()) {
    out.stratum_warning = true;
    const std::vector<int64_t>& pool = observed.empty() ? occluded : observed;
    draw(pool, cfg.observed_samples + cfg.occluded_samples);
    return out;
  }
  draw(observed, cfg.observed_samples);
  draw(occluded, cfg.occluded_samples);
  return out;
}

namespace {

struct DimsKey {
  int w, h, d;
  bool operator<(const DimsKey& o) const {
    return std::tie(w, h, d) < std::tie(o.w, o.h, o.d);
  }
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(12);
  os << v;
  return os.str();
}

}  // namespace

PvaModel train(const Manifest& manifest, const TrainConfig& tc, const PvaConfig& pc,
               const TrainOptions& opts) {
  tc.validate();
  pc.validate();
  const std::vector<std::filesystem::path> paths = manifest.records("train");
  if (paths.empty()) throw ValueError("manifest has no train records");

  std::vector<TsdfVolume> volumes;
  std::vector<PointCloud> clouds;
  volumes.reserve(paths.size());
  for (const auto& p : paths) {
    volumes.push_back(read_record(p));
    clouds.push_back(generate_points(volumes.back()));
    if (clouds.back().size() == 0)
      throw ValueError("record " + p.string() + " yields an empty point cloud");
  }

  std::vector<TsdfVolume> val_volumes;
  if (opts.eval_every > 0)
    for (const auto& p : manifest.records("val")) val_volumes.push_back(read_record(p));

  // The voxel positions depend only on the grid dims, so one spatial index
  // per distinct dims serves every scene and iteration.
  std::map<DimsKey, GridIndex> voxel_indices;
  auto voxel_index_for = [&](GridDims dims) -> const GridIndex* {
    if (!pc.uses_voxel_stream()) return nullptr;
    const DimsKey key{dims.w, dims.h, dims.d};
    auto it = voxel_indices.find(key);
    if (it == voxel_indices.end())
      it = voxel_indices
               .emplace(key, GridIndex(voxel_positions(dims), pc.ellipsoid_minor_radius))
               .first;
    return &it->second;
  };

  PvaModel model(pc, Rng::mix(tc.seed, 0x10de1));
  const int n_scenes = static_cast<int>(volumes.size());
  const int64_t iters_per_epoch =
      (n_scenes + tc.batch_size - 1) / tc.batch_size;
  const int64_t max_iter = static_cast<int64_t>(tc.epochs) * iters_per_epoch;
  Rng master(tc.seed);

  int64_t iter = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::vector<int> order(static_cast<size_t>(n_scenes));
    for (int i = 0; i < n_scenes; ++i) order[static_cast<size_t>(i)] = i;
    Rng order_rng = master.child(Rng::mix(0x04de4, static_cast<uint64_t>(epoch)));
    order_rng.shuffle(order);

    for (int64_t b = 0; b < iters_per_epoch; ++b, ++iter) {
      const double lr = poly_lr(iter, max_iter, tc);
      const int64_t lo = b * tc.batch_size;
      const int64_t hi = std::min<int64_t>(lo + tc.batch_size, n_scenes);
      const double inv_batch = 1.0 / static_cast<double>(hi - lo);

      model.zero_grads();
      double loss_acc = 0, ssc_acc = 0, sp_acc = 0;
      for (int64_t s = lo; s < hi; ++s) {
        const int scene = order[static_cast<size_t>(s)];
        Rng srng = master.child(
            Rng::mix(0x5cee + static_cast<uint64_t>(scene), static_cast<uint64_t>(iter)));
        const BatchSample batch = sample_batch(clouds[static_cast<size_t>(scene)], tc, srng);

        Tape tape;
        ForwardResult fr =
            forward_full(tape, volumes[static_cast<size_t>(scene)], model, srng,
                         &batch.indices, voxel_index_for(volumes[static_cast<size_t>(scene)].dims));
        Tensor ssc = ssc_loss(tape, fr.logits, fr.levels[0].labels);
        SpLossResult sp = sp_loss(tape, fr.sp_weights, fr.sp_same_class);
        Tensor total = total_loss(tape, ssc, sp, tc.lambda);
        if (!std::isfinite(total.item()))
          throw NumericError("NaN loss at iteration " + std::to_string(iter));
        Tensor scaled = scale(tape, total, inv_batch);
        tape.backward(scaled);
        loss_acc += total.item() * inv_batch;
        ssc_acc += ssc.item() * inv_batch;
        sp_acc += sp.value.item() * inv_batch;
      }
      sgd_step(model.parameters(), lr, tc);
      if (opts.log) {
        (*opts.log) << "iter " << iter << " epoch " << epoch << " lr " << fmt(lr) << " loss "
                    << fmt(loss_acc) << " ssc " << fmt(ssc_acc) << " sp " << fmt(sp_acc)
                    << '\n';
      }
    }

    if (opts.eval_every > 0 && (epoch + 1) % opts.eval_every == 0 && !val_volumes.empty()) {
      const EvalReport r = evaluate_volumes(val_volumes, model);
      if (opts.log) (*opts.log) << "eval epoch " << epoch << ' ' << r.to_string() << '\n';
    }
    if (opts.epoch_hook && opts.epoch_hook(epoch, model)) break;
  }

  if (!opts.checkpoint_out.empty()) save_checkpoint(opts.checkpoint_out, model);
  return model;
}

EvalReport evaluate_volumes(std::span<const TsdfVolume> volumes, const PvaModel& model) {
  if (volumes.empty()) throw ValueError("evaluate on an empty scene set");
  ScCounts sc;
  SscCounts ssc(model.config().class_count);
  for (size_t i = 0; i < volumes.size(); ++i) {
    const TsdfVolume& v = volumes[i];
    const std::vector<uint8_t> pred = infer_labels(v, model);
    sc.add(sc_count(pred, v.label, v.kind));
    ssc.add(ssc_count(pred, v.label, v.kind, model.config().class_count));
  }
  return finalize_report(sc, ssc);
}

EvalReport evaluate(const Manifest& manifest, const std::string& split,
                    const PvaModel& model) {
  const std::vector<std::filesystem::path> paths = manifest.records(split);
  if (paths.empty()) throw ValueError("manifest has no '" + split + "' records");
  std::vector<TsdfVolume> volumes;
  volumes.reserve(paths.size());
  for (const auto& p : paths) volumes.push_back(read_record(p));
  return evaluate_volumes(volumes, model);
}

std::vector<uint8_t> infer_labels(const TsdfVolume& v, const PvaModel& model) {
  const PointCloud cloud = generate_points(v);
  if (cloud.size() == 0) throw ValueError("empty scene: nothing to infer");
  Tape tape;
  // Inference runs at the full point count; the seed is fixed so repeated
  // evaluations of one checkpoint are bitwise identical.
  Rng rng(Rng::mix(0xe7a1, v.dims.count()));
  ForwardResult fr = forward_full(tape, v, model, rng);
  tape.clear();
  return voxelize_predictions(cloud, fr.logits, v.dims);
}

int64_t OpsReport::total() const {
  int64_t t = 0;
  for (const OpsReportEntry& e : entries) t += e.macs;
  return t;
}

std::string OpsReport::to_string() const {
  std::ostringstream os;
  os << "stage macs\n";
  for (const OpsReportEntry& e : entries) os << e.stage << ' ' << e.macs << '\n';
  os << "total " << total() << '\n';
  return os.str();
}

OpsReport ops_report(const PvaConfig& pc, const SceneStats& stats) {
  OpsReport rep;
  const int64_t nv = stats.dims.count();
  const int cv = pc.voxel_stream_channels;

  int64_t vox = 0;
  if (pc.uses_voxel_stream() && cv > 0)
    vox = nv * 27 * (1 * cv) + nv * 27 * (static_cast<int64_t>(cv) * cv);
  rep.entries.push_back({"voxel_stream", vox});

  auto level_width = [&](int level, int extra) {
    return level == 0 ? 5 : pc.sa_channels[static_cast<size_t>(level - 1)] + extra;
  };
  const int extra = pc.ava_extra_channels();

  std::vector<int64_t> level_n(static_cast<size_t>(pc.n_sa_layers) + 1);
  level_n[0] = stats.point_count;
  for (int l = 1; l <= pc.n_sa_layers; ++l)
    level_n[static_cast<size_t>(l)] = std::min<int64_t>(
        pc.sa_sample_counts[static_cast<size_t>(l - 1)], level_n[static_cast<size_t>(l - 1)]);

  for (int l = 1; l <= pc.n_sa_layers; ++l) {
    const double nb =
        std::min(stats.avg_sa_neighbors, static_cast<double>(pc.sa_group_caps[static_cast<size_t>(l - 1)]));
    const int in = 3 + level_width(l - 1, pc.has_ava_at(l - 1) ? extra : 0);
    const int out = pc.sa_channels[static_cast<size_t>(l - 1)];
    const double macs = static_cast<double>(level_n[static_cast<size_t>(l)]) * nb *
                        (static_cast<double>(in) * out + static_cast<double>(out) * out);
    rep.entries.push_back({"sa" + std::to_string(l), static_cast<int64_t>(macs)});

    if (pc.has_ava_at(l) && pc.ava_mode != AvaMode::None && pc.ava_mode != AvaMode::Nearest) {
      const int fields = pc.ava_mode == AvaMode::Anisotropic ? 3 : 1;
      const double vb = std::min(stats.avg_voxel_neighbors, static_cast<double>(pc.ellipsoid_cap));
      const double amacs = static_cast<double>(level_n[static_cast<size_t>(l)]) * fields * vb *
                           (static_cast<double>(out + cv) * pc.ava_channels);
      rep.entries.push_back({"ava" + std::to_string(l), static_cast<int64_t>(amacs)});
    }
  }

  for (int l = pc.n_sa_layers - 1; l >= 0; --l) {
    const int src = l + 1 == pc.n_sa_layers
                        ? level_width(pc.n_sa_layers, pc.has_ava_at(pc.n_sa_layers) ? extra : 0)
                        : pc.fp_channels[static_cast<size_t>(l + 1)];
    const int skip = level_width(l, pc.has_ava_at(l) ? extra : 0);
    const int out = pc.fp_channels[static_cast<size_t>(l)];
    const int64_t n = level_n[static_cast<size_t>(l)];
    double macs = static_cast<double>(n) * pc.fp_k * src;  // interpolation
    macs += static_cast<double>(n) *
            (static_cast<double>(src + skip) * out + static_cast<double>(out) * out);
    if (pc.fp_mode == FpMode::SemanticAware)
      macs += static_cast<double>(n) * pc.fp_k *
              (2.0 * skip * pc.sp_hidden + pc.sp_hidden);
    rep.entries.push_back({"fp" + std::to_string(l), static_cast<int64_t>(macs)});
  }

  const double head = static_cast<double>(stats.point_count) *
                      (static_cast<double>(pc.fp_channels[0]) * pc.head_hidden +
                       static_cast<double>(pc.head_hidden) * (pc.class_count + 1));
  rep.entries.push_back({"head", static_cast<int64_t>(head)});
  return rep;
}

}  // namespace pva
