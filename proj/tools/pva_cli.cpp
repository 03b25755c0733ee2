// Command-line surface for the PVA-Net semantic scene completion pipeline:
// synthetic dataset generation, training, evaluation, inference, gradient
// checking, the ablation grid and PLY export.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "pva/checkpoint.hpp"
#include "pva/loss.hpp"
#include "pva/network.hpp"
#include "pva/rng.hpp"
#include "pva/synth.hpp"
#include "pva/train.hpp"

namespace fs = std::filesystem;
using namespace pva;

namespace {

GridDims parse_dims(const std::string& s) {
  GridDims d;
  char sep1 = 0, sep2 = 0;
  std::istringstream is(s);
  if (!(is >> d.w >> sep1 >> d.h >> sep2 >> d.d) || sep1 != 'x' || sep2 != 'x')
    throw ValueError("dims must look like 30x18x30, got '" + s + "'");
  return d;
}

std::vector<int> parse_positions(const std::string& s) {
  std::vector<int> out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(std::stoi(tok));
  return out;
}

int cmd_gen(int count, const std::string& dims_text, uint64_t seed, const fs::path& out,
            const std::string& split) {
  const GridDims dims = parse_dims(dims_text);
  fs::create_directories(out);
  const fs::path manifest_path = out / "manifest.txt";
  std::vector<ManifestEntry> entries;
  if (fs::exists(manifest_path)) entries = read_manifest(manifest_path).entries;
  const size_t base = entries.size();
  for (int i = 0; i < count; ++i) {
    char name[64];
    std::snprintf(name, sizeof(name), "record_%05zu.sscb", base + static_cast<size_t>(i));
    const TsdfVolume v = record_from_seed(dims, Rng::mix(seed, static_cast<uint64_t>(i)));
    write_record(out / name, v);
    entries.push_back({split, name});

    int64_t visible = 0;
    for (const VoxelKind k : v.kind)
      if (k == VoxelKind::VisibleEmpty) ++visible;
    std::cout << name << " split " << split << " points "
              << (v.dims.count() - visible) << "/" << v.dims.count() << " discarded "
              << std::fixed << std::setprecision(1)
              << 100.0 * static_cast<double>(visible) / static_cast<double>(v.dims.count())
              << "%\n";
  }
  write_manifest(manifest_path, entries);
  std::cout << "wrote " << count << " records and " << manifest_path.string() << "\n";
  return 0;
}

int cmd_train(const fs::path& data, const TrainConfig& tc, const PvaConfig& pc,
              const fs::path& out, const fs::path& log_path, int eval_every) {
  const Manifest manifest = read_manifest(data);
  TrainOptions opts;
  opts.checkpoint_out = out;
  opts.eval_every = eval_every;
  std::ofstream log_file;
  if (!log_path.empty()) {
    log_file.open(log_path, std::ios::trunc);
    if (!log_file) throw FormatError("cannot open log file " + log_path.string());
    opts.log = &log_file;
  } else {
    opts.log = &std::cout;
  }
  train(manifest, tc, pc, opts);
  std::cout << "checkpoint written to " << out.string() << "\n";
  return 0;
}

int cmd_eval(const fs::path& data, const std::string& split, const fs::path& model_path) {
  const Manifest manifest = read_manifest(data);
  const PvaModel model = load_checkpoint(model_path);
  const EvalReport r = evaluate(manifest, split, model);
  std::cout << r.to_string() << "\n";
  return 0;
}

int cmd_infer(const fs::path& in, const fs::path& model_path, const fs::path& out) {
  const TsdfVolume v = read_record(in);
  const PvaModel model = load_checkpoint(model_path);
  TsdfVolume pred = v;
  pred.label = infer_labels(v, model);
  write_record(out, pred);
  std::cout << "wrote " << out.string() << "\n";
  return 0;
}

// Finite-difference verification of every autodiff building block plus the
// end-to-end loss on a tiny scene.
int cmd_gradcheck() {
  Rng rng(2024);
  bool ok = true;
  auto report = [&](const std::string& name, double err, double tol) {
    const bool pass = err < tol;
    ok = ok && pass;
    std::cout << (pass ? "[PASS] " : "[FAIL] ") << name << " max_rel_err " << err
              << " tol " << tol << "\n";
  };

  auto rand_tensor = [&](std::vector<int64_t> shape) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(-1.0, 1.0);
    return t;
  };

  Tensor x = rand_tensor({3, 4});
  Tensor w = rand_tensor({4, 5});
  Tensor b = rand_tensor({5});
  report("linear",
         finite_difference_check(
             [&](Tape& t, const Tensor& v) { return reduce_sum(t, linear(t, v, w, b)); }, x,
             1e-5),
         1e-5);
  report("relu",
         finite_difference_check(
             [&](Tape& t, const Tensor& v) {
               return reduce_sum(t, relu(t, linear(t, v, w, b)));
             },
             x, 1e-5),
         1e-5);
  report("sigmoid",
         finite_difference_check(
             [&](Tape& t, const Tensor& v) {
               return reduce_sum(t, sigmoid(t, linear(t, v, w, b)));
             },
             x, 1e-5),
         1e-5);
  Tensor cother = rand_tensor({3, 2});
  report("concat_channels",
         finite_difference_check(
             [&](Tape& t, const Tensor& v) {
               return reduce_sum(t, concat_channels(t, v, cother));
             },
             x, 1e-5),
         1e-5);
  Tensor pool_in = rand_tensor({2, 3, 4});
  std::vector<uint8_t> mask = {1, 1, 0, 1, 1, 1};
  report("masked_max_pool",
         finite_difference_check(
             [&](Tape& t, const Tensor& v) {
               return reduce_sum(t, masked_max_pool(t, v, mask));
             },
             pool_in, 1e-5),
         1e-5);
  Tensor logits = rand_tensor({4, 11});
  std::vector<int> targets = {1, 0, 10, 4};
  std::vector<double> weights(4, 0.25);
  report("softmax_cross_entropy",
         finite_difference_check(
             [&](Tape& t, const Tensor& v) {
               return softmax_cross_entropy(t, v, targets, weights).loss;
             },
             logits, 1e-5),
         1e-5);
  Tensor pre = rand_tensor({6});
  std::vector<double> bce_t = {1, 0, 1, 1, 0, 1};
  report("binary_cross_entropy",
         finite_difference_check(
             [&](Tape& t, const Tensor& v) {
               return binary_cross_entropy(t, sigmoid(t, v), bce_t, 1.0 / 6.0);
             },
             pre, 1e-5),
         1e-5);

  // end-to-end loss on a tiny scene, a few coordinates per parameter group
  const TsdfVolume scene = record_from_seed({8, 8, 8}, 17);
  PvaModel model(PvaConfig::tiny(), 29);
  const PointCloud cloud = generate_points(scene);
  std::vector<int64_t> subset;
  const int64_t stride = std::max<int64_t>(1, cloud.size() / 48);
  for (int64_t i = 0; i < cloud.size() && subset.size() < 48; i += stride) subset.push_back(i);

  auto loss_of = [&](Tape& tape) {
    Rng fr(555);
    ForwardResult res = forward_full(tape, scene, model, fr, &subset);
    Tensor ssc = ssc_loss(tape, res.logits, res.levels[0].labels);
    const SpLossResult sp = sp_loss(tape, res.sp_weights, res.sp_same_class);
    return total_loss(tape, ssc, sp, 0.5);
  };
  model.zero_grads();
  {
    Tape tape;
    Tensor loss = loss_of(tape);
    tape.backward(loss);
  }
  double worst = 0.0;
  const double h = 1e-5;
  for (Parameter& p : model.parameters()) {
    const std::vector<double> analytic(p.tensor.grad(), p.tensor.grad() + p.tensor.numel());
    for (int trial = 0; trial < 2; ++trial) {
      const int64_t i = static_cast<int64_t>(rng.below(static_cast<uint64_t>(p.tensor.numel())));
      const double saved = p.tensor.data()[i];
      p.tensor.data()[i] = saved + h;
      Tape tp;
      const double fp = loss_of(tp).item();
      p.tensor.data()[i] = saved - h;
      Tape tm;
      const double fm = loss_of(tm).item();
      p.tensor.data()[i] = saved;
      const double numeric = (fp - fm) / (2 * h);
      const double a = analytic[static_cast<size_t>(i)];
      worst = std::max(worst, std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12));
    }
  }
  report("end_to_end_loss", worst, 1e-4);

  if (!ok) throw NumericError("gradient check failed");
  std::cout << "all gradient checks passed\n";
  return 0;
}

struct AblationRun {
  std::string label;
  AvaMode ava;
  FpMode fp;
  EvalReport report;
};

int cmd_ablate(const fs::path& data, int epochs, uint64_t seed, const fs::path& out_path) {
  const Manifest manifest = read_manifest(data);
  TrainConfig tc;
  tc.epochs = epochs;
  tc.seed = seed;

  // Deduplicated grid covering the module, aggregation and propagation tables.
  std::vector<AblationRun> runs = {
      {"baseline", AvaMode::None, FpMode::InverseEuclidean, {}},
      {"sp_only", AvaMode::None, FpMode::SemanticAware, {}},
      {"ava_only", AvaMode::Anisotropic, FpMode::InverseEuclidean, {}},
      {"full", AvaMode::Anisotropic, FpMode::SemanticAware, {}},
      {"nearest", AvaMode::Nearest, FpMode::SemanticAware, {}},
      {"spherical", AvaMode::Spherical, FpMode::SemanticAware, {}},
      {"cosine", AvaMode::Anisotropic, FpMode::Cosine, {}},
  };
  const std::string eval_split =
      manifest.records("test").empty() ? std::string("val") : std::string("test");
  for (AblationRun& run : runs) {
    PvaConfig pc;
    pc.ava_mode = run.ava;
    pc.fp_mode = run.fp;
    const PvaModel model = train(manifest, tc, pc, {});
    run.report = evaluate(manifest, eval_split, model);
    std::cout << "trained " << run.label << ": sc_iou " << run.report.sc_iou
              << " ssc_miou " << run.report.ssc_miou << "\n";
  }

  auto find = [&](const std::string& label) -> const AblationRun& {
    for (const AblationRun& r : runs)
      if (r.label == label) return r;
    throw ValueError("missing ablation run " + label);
  };
  std::ostringstream rep;
  rep << "module grid (baseline / +SP / +AVA / +AVA+SP)\n";
  for (const char* l : {"baseline", "sp_only", "ava_only", "full"})
    rep << "  " << l << " sc_iou " << find(l).report.sc_iou << " ssc_miou "
        << find(l).report.ssc_miou << "\n";
  rep << "aggregation grid (point-only / nearest / spherical / anisotropic)\n";
  for (const char* l : {"sp_only", "nearest", "spherical", "full"})
    rep << "  " << l << " sc_iou " << find(l).report.sc_iou << " ssc_miou "
        << find(l).report.ssc_miou << "\n";
  rep << "propagation grid (inverse-euclidean / cosine / semantic-aware)\n";
  for (const char* l : {"ava_only", "cosine", "full"})
    rep << "  " << l << " sc_iou " << find(l).report.sc_iou << " ssc_miou "
        << find(l).report.ssc_miou << "\n";
  rep << (find("full").report.ssc_miou >= find("baseline").report.ssc_miou
              ? "full >= baseline: yes\n"
              : "full >= baseline: NO\n");

  std::cout << rep.str();
  if (!out_path.empty()) {
    std::ofstream os(out_path, std::ios::trunc);
    os << rep.str();
    std::cout << "report written to " << out_path.string() << "\n";
  }
  return 0;
}

int cmd_export_ply(const fs::path& in, const fs::path& out) {
  const TsdfVolume v = read_record(in);
  const PointCloud cloud = generate_points(v);
  // one color per class, empty class gray
  static const int palette[12][3] = {
      {128, 128, 128}, {220, 220, 160}, {140, 100, 60},  {170, 170, 170},
      {120, 200, 255}, {255, 140, 60},  {200, 60, 60},   {150, 60, 200},
      {60, 160, 60},   {60, 60, 220},   {230, 200, 50},  {255, 105, 180}};
  std::ofstream os(out, std::ios::trunc);
  if (!os) throw FormatError("cannot open " + out.string() + " for writing");
  os << "ply\nformat ascii 1.0\nelement vertex " << cloud.size()
     << "\nproperty float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
  for (int64_t i = 0; i < cloud.size(); ++i) {
    const int64_t idx = cloud.src_voxel[static_cast<size_t>(i)];
    const int x = static_cast<int>(idx / (static_cast<int64_t>(v.dims.h) * v.dims.d));
    const int y = static_cast<int>((idx / v.dims.d) % v.dims.h);
    const int z = static_cast<int>(idx % v.dims.d);
    const int* c = palette[cloud.label[static_cast<size_t>(i)] % 12];
    os << x << ' ' << y << ' ' << z << ' ' << c[0] << ' ' << c[1] << ' ' << c[2] << '\n';
  }
  std::cout << "wrote " << cloud.size() << " points to " << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"point-voxel aggregation network for semantic scene completion"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen", "generate synthetic SSCB records");
  int gen_count = 8;
  std::string gen_dims = "30x18x30";
  uint64_t gen_seed = 1;
  std::string gen_out;
  std::string gen_split = "train";
  gen->add_option("--count", gen_count, "number of scenes");
  gen->add_option("--dims", gen_dims, "volume dims WxHxD");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--split", gen_split, "manifest split for these records");

  auto* tr = app.add_subcommand("train", "train a model on a manifest");
  std::string tr_data, tr_out = "model.pvam", tr_log;
  std::string tr_ava = "anisotropic", tr_fp = "semantic_aware", tr_pos = "1";
  TrainConfig tc;
  int tr_eval_every = 0;
  tr->add_option("--data", tr_data, "manifest path")->required();
  tr->add_option("--epochs", tc.epochs, "training epochs");
  tr->add_option("--lr", tc.lr0, "initial learning rate");
  tr->add_option("--lambda", tc.lambda, "sp loss balance factor");
  tr->add_option("--ava-mode", tr_ava, "none|nearest|spherical|anisotropic");
  tr->add_option("--ava-position", tr_pos, "comma list of SA layers, e.g. 1 or 1,2");
  tr->add_option("--fp-mode", tr_fp, "inverse_euclidean|cosine|semantic_aware");
  tr->add_option("--seed", tc.seed, "train seed");
  tr->add_option("--out", tr_out, "checkpoint output path");
  tr->add_option("--batch-size", tc.batch_size, "scenes per step");
  tr->add_option("--obs-samples", tc.observed_samples, "observed points per scene");
  tr->add_option("--occ-samples", tc.occluded_samples, "occluded points per scene");
  tr->add_option("--log", tr_log, "metrics log path (default: stdout)");
  tr->add_option("--eval-every", tr_eval_every, "epochs between val reports");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  std::string ev_data, ev_split = "val", ev_model;
  ev->add_option("--data", ev_data, "manifest path")->required();
  ev->add_option("--split", ev_split, "split name");
  ev->add_option("--model", ev_model, "checkpoint path")->required();

  auto* in = app.add_subcommand("infer", "predict labels for one record");
  std::string in_rec, in_model, in_out = "prediction.sscb";
  in->add_option("--in", in_rec, "input record")->required();
  in->add_option("--model", in_model, "checkpoint path")->required();
  in->add_option("--out", in_out, "output record");

  auto* gc = app.add_subcommand("gradcheck", "run the finite-difference suite");

  auto* ab = app.add_subcommand("ablate", "run the ablation grids");
  std::string ab_data, ab_out;
  int ab_epochs = 60;
  uint64_t ab_seed = 1;
  ab->add_option("--data", ab_data, "manifest path")->required();
  ab->add_option("--epochs", ab_epochs, "epochs per configuration");
  ab->add_option("--seed", ab_seed, "train seed");
  ab->add_option("--out", ab_out, "report output path");

  auto* ply = app.add_subcommand("export-ply", "export a record as a colored PLY");
  std::string ply_in, ply_out = "scene.ply";
  ply->add_option("--in", ply_in, "input record")->required();
  ply->add_option("--out", ply_out, "output PLY path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_gen(gen_count, gen_dims, gen_seed, gen_out, gen_split);
    if (tr->parsed()) {
      PvaConfig pc;
      pc.ava_mode = ava_mode_from_string(tr_ava);
      pc.fp_mode = fp_mode_from_string(tr_fp);
      pc.ava_positions = parse_positions(tr_pos);
      return cmd_train(tr_data, tc, pc, tr_out, tr_log, tr_eval_every);
    }
    if (ev->parsed()) return cmd_eval(ev_data, ev_split, ev_model);
    if (in->parsed()) return cmd_infer(in_rec, in_model, in_out);
    if (gc->parsed()) return cmd_gradcheck();
    if (ab->parsed()) return cmd_ablate(ab_data, ab_epochs, ab_seed, ab_out);
    if (ply->parsed()) return cmd_export_ply(ply_in, ply_out);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
