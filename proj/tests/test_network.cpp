#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

#include "pva/loss.hpp"
#include "pva/network.hpp"
#include "pva/rng.hpp"
#include "pva/synth.hpp"

using namespace pva;

namespace {

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

TsdfVolume tiny_scene(uint64_t seed, GridDims dims = {8, 8, 8}) {
  return record_from_seed(dims, seed);
}

// Spread subset of at most `cap` cloud indices.
std::vector<int64_t> spread_subset(const TsdfVolume& v, int cap) {
  const PointCloud cloud = generate_points(v);
  std::vector<int64_t> subset;
  const int64_t stride = std::max<int64_t>(1, cloud.size() / cap);
  for (int64_t i = 0; i < cloud.size() && static_cast<int>(subset.size()) < cap; i += stride)
    subset.push_back(i);
  return subset;
}

Tensor tiny_total_loss(Tape& tape, const TsdfVolume& v, const PvaModel& model,
                       const std::vector<int64_t>& subset, double lambda = 0.5) {
  Rng rng(777);
  ForwardResult fr = forward_full(tape, v, model, rng, &subset);
  Tensor ssc = ssc_loss(tape, fr.logits, fr.levels[0].labels);
  const SpLossResult sp = sp_loss(tape, fr.sp_weights, fr.sp_same_class);
  return total_loss(tape, ssc, sp, lambda);
}

void copy_values(Tensor& dst, const Tensor& src) {
  REQUIRE(dst.numel() == src.numel());
  std::memcpy(dst.data(), src.data(), sizeof(double) * static_cast<size_t>(src.numel()));
}

}  // namespace

TEST_CASE("config round trips through its canonical text form") {
  PvaConfig c = PvaConfig::tiny();
  c.ava_mode = AvaMode::Spherical;
  c.fp_mode = FpMode::Cosine;
  c.ava_positions = {2, 1};
  const std::string text = c.serialize();
  const PvaConfig d = PvaConfig::deserialize(text);
  CHECK(d.serialize() == text);
  CHECK(d.digest() == c.digest());

  PvaConfig other = c;
  other.fp_k = 5;
  CHECK(other.digest() != c.digest());

  CHECK_THROWS_AS(PvaConfig::deserialize("nonsense=1\n"), FormatError);
}

TEST_CASE("config validation rejects bad setups") {
  PvaConfig c = PvaConfig::tiny();
  c.ava_positions = {9};
  CHECK_THROWS_AS(c.validate(), ValueError);
  c = PvaConfig::tiny();
  c.ellipsoid_major_scale = 1.0;
  CHECK_THROWS_AS(c.validate(), ValueError);
  c = PvaConfig::tiny();
  c.sa_radii = {0.25, 0.5};
  CHECK_THROWS_AS(c.validate(), ValueError);
}

TEST_CASE("model registers unique parameters per active configuration") {
  PvaModel model(PvaConfig::tiny(), 1);
  std::set<std::string> names;
  for (const Parameter& p : model.parameters()) {
    CHECK(names.insert(p.name).second);
    CHECK(p.momentum.size() == static_cast<size_t>(p.tensor.numel()));
    for (double m : p.momentum) CHECK(m == 0.0);
  }
  CHECK(names.count("voxel.conv1.w") == 1);
  CHECK(names.count("ava1.x.w") == 1);
  CHECK(names.count("sp0.l1.w") == 1);
  CHECK(names.count("head.l2.b") == 1);

  // the pure point baseline drops the voxel stream, AVA and SP parameters
  PvaConfig base = PvaConfig::tiny();
  base.ava_mode = AvaMode::None;
  base.fp_mode = FpMode::InverseEuclidean;
  PvaModel baseline(base, 1);
  for (const Parameter& p : baseline.parameters()) {
    CHECK(p.name.find("voxel.") == std::string::npos);
    CHECK(p.name.find("ava") == std::string::npos);
    CHECK(p.name.find("sp") == std::string::npos);
  }
  CHECK(baseline.parameters().size() < model.parameters().size());
}

TEST_CASE("voxel stream on a zero volume is zero") {
  const GridDims dims{5, 4, 5};
  TsdfVolume v = TsdfVolume::zeros(dims);
  PvaModel model(PvaConfig::tiny(), 3);  // biases start at zero
  Tape tape;
  const Tensor out = voxel_stream_forward(tape, v, model);
  CHECK(out.shape() == std::vector<int64_t>{dims.count(), 4});
  for (int64_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == 0.0);
}

TEST_CASE("voxel stream impulse support is the composite 5x5x5 field") {
  const GridDims dims{9, 9, 9};
  TsdfVolume v = TsdfVolume::zeros(dims);
  v.tsdf[static_cast<size_t>(dims.index(4, 4, 4))] = 1.0f;
  PvaModel model(PvaConfig::tiny(), 5);
  Tape tape;
  const Tensor out = voxel_stream_forward(tape, v, model);
  const int64_t cv = out.dim(1);
  for (int x = 0; x < 9; ++x)
    for (int y = 0; y < 9; ++y)
      for (int z = 0; z < 9; ++z) {
        double mag = 0;
        for (int64_t c = 0; c < cv; ++c)
          mag += std::abs(out.data()[dims.index(x, y, z) * cv + c]);
        const bool in_field =
            std::abs(x - 4) <= 2 && std::abs(y - 4) <= 2 && std::abs(z - 4) <= 2;
        if (!in_field) CHECK(mag == 0.0);
      }
  double corner = 0;
  for (int64_t c = 0; c < cv; ++c) corner += std::abs(out.data()[dims.index(2, 2, 2) * cv + c]);
  CHECK(corner > 0.0);
}

TEST_CASE("voxel stream kernels pass finite differences on a 4x4x4 grid") {
  const GridDims dims{4, 4, 4};
  Rng rng(7);
  TsdfVolume v = TsdfVolume::zeros(dims);
  for (auto& t : v.tsdf) t = static_cast<float>(rng.uniform(-1, 1));
  PvaConfig pc = PvaConfig::tiny();
  pc.voxel_stream_channels = 3;
  PvaModel model(pc, 9);

  auto loss_value = [&]() {
    Tape t;
    // weight the sum so different channels matter differently
    Tensor out = voxel_stream_forward(t, v, model);
    Tensor s = Tensor({out.dim(1), 1});
    for (int64_t c = 0; c < out.dim(1); ++c) s.data()[c] = 0.5 + 0.25 * static_cast<double>(c);
    Tensor zero({1});
    return reduce_sum(t, linear(t, out, s, zero)).item();
  };
  auto loss_backward = [&]() {
    model.zero_grads();
    Tape t;
    Tensor out = voxel_stream_forward(t, v, model);
    Tensor s = Tensor({out.dim(1), 1});
    for (int64_t c = 0; c < out.dim(1); ++c) s.data()[c] = 0.5 + 0.25 * static_cast<double>(c);
    Tensor zero({1});
    Tensor loss = reduce_sum(t, linear(t, out, s, zero));
    t.backward(loss);
  };

  loss_backward();
  const double h = 1e-6;
  for (const char* pname : {"voxel.conv1.w", "voxel.conv2.w", "voxel.conv2.b"}) {
    Parameter& p = model.parameter(pname);
    const std::vector<double> analytic(p.tensor.grad(), p.tensor.grad() + p.tensor.numel());
    Rng pick(3);
    double worst = 0.0;
    for (int t = 0; t < 20; ++t) {
      const int64_t i = static_cast<int64_t>(pick.below(static_cast<uint64_t>(p.tensor.numel())));
      const double saved = p.tensor.data()[i];
      p.tensor.data()[i] = saved + h;
      const double fp = loss_value();
      p.tensor.data()[i] = saved - h;
      const double fm = loss_value();
      p.tensor.data()[i] = saved;
      const double numeric = (fp - fm) / (2 * h);
      const double a = analytic[static_cast<size_t>(i)];
      worst = std::max(worst, std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12));
    }
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("sa layer on a single point pools its own feature") {
  PvaModel model(PvaConfig::tiny(), 11);
  LevelState in;
  in.positions = {{0.3, 0.4, 0.5}};
  in.features = Tensor({1, 5}, {0.1, -0.2, 0.3, 0.5, 0.25});
  in.labels = {6};
  in.kinds = {VoxelKind::Occluded};
  Tape tape;
  Rng rng(1);
  const LevelState out = sa_layer_forward(tape, in, 1, model, rng);
  CHECK(out.size() == 1);
  CHECK(out.parent_index == std::vector<int>{0});
  CHECK(out.positions[0] == in.positions[0]);
  CHECK(out.labels[0] == 6);

  // pooled feature equals the MLP applied to (zero relpos || own feature)
  Tape ref;
  Tensor row({1, 8}, {0, 0, 0, 0.1, -0.2, 0.3, 0.5, 0.25});
  Tensor h = linear(ref, row, model.weight(model.sa_mlps[0][0]), model.bias(model.sa_mlps[0][0]));
  h = relu(ref, h);
  h = linear(ref, h, model.weight(model.sa_mlps[0][1]), model.bias(model.sa_mlps[0][1]));
  h = relu(ref, h);
  for (int64_t c = 0; c < h.numel(); ++c)
    CHECK(out.features.data()[c] == doctest::Approx(h.data()[c]).epsilon(1e-14));
}

TEST_CASE("sa layer features are invariant to input point order") {
  Rng rng(13);
  const int n = 24;
  LevelState in;
  in.features = random_tensor({n, 5}, rng);
  for (int i = 0; i < n; ++i) {
    in.positions.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
    in.labels.push_back(static_cast<uint8_t>(rng.below(12)));
    in.kinds.push_back(VoxelKind::Occluded);
  }

  PvaConfig pc = PvaConfig::tiny();
  pc.sa_sample_counts = {n, 8, 4, 2};  // keep every point: identity sample set
  pc.sa_group_caps = {64, 8, 8, 8};    // no subsampling inside groups
  PvaModel model(pc, 17);

  Tape t1;
  Rng r1(5);
  const LevelState a = sa_layer_forward(t1, in, 1, model, r1);

  // reverse the input order
  LevelState rev;
  rev.features = Tensor({n, 5});
  for (int i = 0; i < n; ++i) {
    const int j = n - 1 - i;
    rev.positions.push_back(in.positions[static_cast<size_t>(j)]);
    rev.labels.push_back(in.labels[static_cast<size_t>(j)]);
    rev.kinds.push_back(in.kinds[static_cast<size_t>(j)]);
    std::memcpy(rev.features.data() + i * 5, in.features.data() + j * 5, sizeof(double) * 5);
  }
  Tape t2;
  Rng r2(6);
  const LevelState b = sa_layer_forward(t2, rev, 1, model, r2);

  // compare rows by point identity
  for (int ia = 0; ia < n; ++ia) {
    const int orig = a.parent_index[static_cast<size_t>(ia)];
    const int as_rev = n - 1 - orig;
    int ib = -1;
    for (int q = 0; q < n; ++q)
      if (b.parent_index[static_cast<size_t>(q)] == as_rev) ib = q;
    REQUIRE(ib >= 0);
    for (int64_t c = 0; c < a.features.dim(1); ++c)
      CHECK(a.features.data()[ia * a.features.dim(1) + c] ==
            b.features.data()[ib * b.features.dim(1) + c]);
  }
}

TEST_CASE("sa layer output indices are a subset of the input over random scenes") {
  Rng rng(19);
  PvaConfig pc = PvaConfig::tiny();
  PvaModel model(pc, 23);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 4 + static_cast<int>(rng.below(40));
    LevelState in;
    in.features = random_tensor({n, 5}, rng);
    for (int i = 0; i < n; ++i) {
      in.positions.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
      in.labels.push_back(static_cast<uint8_t>(rng.below(12)));
      in.kinds.push_back(VoxelKind::Occluded);
    }
    Tape tape;
    Rng r(rng.next_u64());
    const LevelState out = sa_layer_forward(tape, in, 1, model, r);
    CHECK(out.size() == std::min<int64_t>(16, n));
    std::set<int> seen;
    for (int p : out.parent_index) {
      CHECK(p >= 0);
      CHECK(p < n);
      CHECK(seen.insert(p).second);  // no repeats
    }
  }
}

TEST_CASE("ava mode none returns the input features unchanged") {
  Rng rng(29);
  PvaModel model(PvaConfig::tiny(), 31);
  const Tensor feats = random_tensor({4, 8}, rng);
  std::vector<Vec3> centers = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  GridIndex vidx(voxel_positions({4, 4, 4}), 0.15);
  Tape tape;
  Rng r(3);
  const Tensor out =
      ava_forward(tape, centers, feats, Tensor({64, 4}), vidx, model, 1, AvaMode::None, r);
  CHECK(out.data() == feats.data());  // same storage, untouched
}

TEST_CASE("ava with empty ellipsoids concatenates a zero fuse vector") {
  Rng rng(37);
  PvaModel model(PvaConfig::tiny(), 41);
  const Tensor feats = random_tensor({2, 8}, rng);
  // voxels live far away from the centers: every receptive field is empty
  std::vector<Vec3> vox_pos = {{10, 10, 10}, {11, 11, 11}};
  GridIndex vidx(vox_pos, 0.15);
  const Tensor vox_feats = random_tensor({2, 4}, rng);
  std::vector<Vec3> centers = {{0, 0, 0}, {0.1, 0.1, 0.1}};
  Tape tape;
  Rng r(5);
  const Tensor out = ava_forward(tape, centers, feats, vox_feats, vidx, model, 1,
                                 AvaMode::Anisotropic, r);
  REQUIRE(out.shape() == std::vector<int64_t>{2, 8 + 6});
  for (int64_t i = 0; i < 2; ++i) {
    for (int64_t c = 0; c < 8; ++c) CHECK(out.data()[i * 14 + c] == feats.data()[i * 8 + c]);
    for (int64_t c = 8; c < 14; ++c) CHECK(out.data()[i * 14 + c] == 0.0);
  }
}

TEST_CASE("ava singleton x-ellipsoid evaluates phi_x by hand") {
  Rng rng(43);
  PvaModel model(PvaConfig::tiny(), 47);  // r=0.15, k=3
  const Tensor feats = random_tensor({1, 8}, rng);
  // offset 0.30 along x: inside the x-major ellipsoid (0.30 < 0.45),
  // outside both others (0.30 >= 0.15)
  std::vector<Vec3> vox_pos = {{0.80, 0.5, 0.5}};
  GridIndex vidx(vox_pos, 0.15);
  const Tensor vox_feats = random_tensor({1, 4}, rng);
  std::vector<Vec3> centers = {{0.5, 0.5, 0.5}};
  Tape tape;
  Rng r(7);
  const Tensor out = ava_forward(tape, centers, feats, vox_feats, vidx, model, 1,
                                 AvaMode::Anisotropic, r);

  // reference: relu(phi_x(f_point || f_voxel)), other axes contribute zero
  Tape ref;
  Tensor pair = concat_channels(ref, feats, vox_feats);
  Tensor h = linear(ref, pair, model.weight(model.ava_dir.at(1)[0]),
                    model.bias(model.ava_dir.at(1)[0]));
  h = relu(ref, h);
  REQUIRE(out.shape() == std::vector<int64_t>{1, 14});
  for (int64_t c = 0; c < 6; ++c)
    CHECK(out.data()[8 + c] == doctest::Approx(h.data()[c]).epsilon(1e-14));
}

TEST_CASE("ava axis-sum symmetry under a coordinate roll") {
  Rng rng(53);
  PvaConfig pc = PvaConfig::tiny();
  pc.ellipsoid_cap = 64;  // keep every neighbor: no subsampling randomness
  PvaModel a(pc, 59);
  PvaModel b(pc, 59);
  // roll (x,y,z) -> (y,z,x): old x axis becomes the new z axis, so
  // phi'_x = phi_y, phi'_y = phi_z, phi'_z = phi_x.
  for (const char* suffix : {".w", ".b"}) {
    copy_values(b.parameter(std::string("ava1.x") + suffix).tensor,
                a.parameter(std::string("ava1.y") + suffix).tensor);
    copy_values(b.parameter(std::string("ava1.y") + suffix).tensor,
                a.parameter(std::string("ava1.z") + suffix).tensor);
    copy_values(b.parameter(std::string("ava1.z") + suffix).tensor,
                a.parameter(std::string("ava1.x") + suffix).tensor);
  }

  const int nv = 40;
  std::vector<Vec3> vox, vox_rolled;
  for (int i = 0; i < nv; ++i) {
    const Vec3 p{rng.uniform(), rng.uniform(), rng.uniform()};
    vox.push_back(p);
    vox_rolled.push_back({p[1], p[2], p[0]});
  }
  const Tensor vox_feats = random_tensor({nv, 4}, rng);
  const Tensor feats = random_tensor({3, 8}, rng);
  std::vector<Vec3> centers, centers_rolled;
  for (int i = 0; i < 3; ++i) {
    const Vec3 c{rng.uniform(), rng.uniform(), rng.uniform()};
    centers.push_back(c);
    centers_rolled.push_back({c[1], c[2], c[0]});
  }

  Tape t1, t2;
  Rng r1(9), r2(9);
  const Tensor out_a = ava_forward(t1, centers, feats, vox_feats, GridIndex(vox, 0.15), a,
                                   1, AvaMode::Anisotropic, r1);
  const Tensor out_b = ava_forward(t2, centers_rolled, feats, vox_feats,
                                   GridIndex(vox_rolled, 0.15), b, 1, AvaMode::Anisotropic, r2);
  REQUIRE(out_a.shape() == out_b.shape());
  for (int64_t i = 0; i < out_a.numel(); ++i)
    CHECK(out_a.data()[i] == doctest::Approx(out_b.data()[i]).epsilon(1e-12));
}

TEST_CASE("sp pair weights: zero final layer gives 0.5, always in (0,1)") {
  Rng rng(61);
  PvaModel model(PvaConfig::tiny(), 67);
  Parameter& w2 = model.parameter("sp0.l2.w");
  Parameter& b2 = model.parameter("sp0.l2.b");
  std::fill(w2.tensor.data(), w2.tensor.data() + w2.tensor.numel(), 0.0);
  std::fill(b2.tensor.data(), b2.tensor.data() + b2.tensor.numel(), 0.0);

  const Tensor fi = random_tensor({6, 5}, rng);
  const Tensor fj = random_tensor({6, 5}, rng);
  Tape tape;
  const Tensor w = sp_pair_weights(tape, fi, fj, model, 0);
  for (int64_t i = 0; i < w.numel(); ++i) CHECK(w.data()[i] == 0.5);

  PvaModel fresh(PvaConfig::tiny(), 71);
  Tape t2;
  const Tensor w_fresh = sp_pair_weights(t2, fi, fj, fresh, 0);
  for (int64_t i = 0; i < w_fresh.numel(); ++i) {
    CHECK(w_fresh.data()[i] > 0.0);
    CHECK(w_fresh.data()[i] < 1.0);
  }
}

TEST_CASE("sp pair weight gradients match finite differences") {
  Rng rng(73);
  PvaModel model(PvaConfig::tiny(), 79);
  const Tensor fi = random_tensor({4, 5}, rng);
  const Tensor fj = random_tensor({4, 5}, rng);
  const double err_i = finite_difference_check(
      [&](Tape& t, const Tensor& x) {
        return reduce_sum(t, sp_pair_weights(t, x, fj, model, 0));
      },
      fi, 1e-5);
  CHECK(err_i < 1e-6);
  const double err_j = finite_difference_check(
      [&](Tape& t, const Tensor& x) {
        return reduce_sum(t, sp_pair_weights(t, fi, x, model, 0));
      },
      fj, 1e-5);
  CHECK(err_j < 1e-6);
}

TEST_CASE("weighted interpolation: hand arithmetic and properties") {
  Tape tape;
  // two neighbors, features [1] and [3], weights 0.2 and 0.6
  Tensor w({2, 1}, {0.2, 0.6});
  Tensor f({2, 1}, {1.0, 3.0});
  CHECK(weighted_interpolate(tape, w, f, 1, 2).data()[0] ==
        doctest::Approx(2.5).epsilon(1e-15));

  // equal weights give the arithmetic mean
  Tensor we({3, 1}, {0.7, 0.7, 0.7});
  Tensor fe({3, 1}, {1.0, 2.0, 6.0});
  CHECK(weighted_interpolate(tape, we, fe, 1, 3).data()[0] ==
        doctest::Approx(3.0).epsilon(1e-12));

  // single neighbor: output equals the neighbor regardless of weight
  Tensor w1({1, 1}, {0.123});
  Tensor f1({1, 1}, {42.0});
  CHECK(weighted_interpolate(tape, w1, f1, 1, 1).data()[0] ==
        doctest::Approx(42.0).epsilon(1e-15));

  // degenerate all-zero weights fall back to the uniform mean
  Tensor w0({2, 1}, {0.0, 0.0});
  Tensor f0({2, 1}, {2.0, 4.0});
  CHECK(weighted_interpolate(tape, w0, f0, 1, 2).data()[0] ==
        doctest::Approx(3.0).epsilon(1e-15));

  // neighbor-order invariance
  Rng rng(83);
  Tensor wr = random_tensor({4, 1}, rng, 0.1, 1.0);
  Tensor fr = random_tensor({4, 3}, rng);
  Tape ta, tb;
  const Tensor base = weighted_interpolate(ta, wr, fr, 1, 4);
  Tensor wp({4, 1});
  Tensor fp({4, 3});
  for (int64_t j = 0; j < 4; ++j) {
    wp.data()[3 - j] = wr.data()[j];
    for (int64_t c = 0; c < 3; ++c) fp.data()[(3 - j) * 3 + c] = fr.data()[j * 3 + c];
  }
  const Tensor perm = weighted_interpolate(tb, wp, fp, 1, 4);
  for (int64_t c = 0; c < 3; ++c)
    CHECK(base.data()[c] == doctest::Approx(perm.data()[c]).epsilon(1e-13));
}

TEST_CASE("weighted interpolation gradients match finite differences") {
  Rng rng(89);
  Tensor w = random_tensor({6, 1}, rng, 0.05, 1.0);
  Tensor f = random_tensor({6, 2}, rng);
  CHECK(finite_difference_check(
            [&](Tape& t, const Tensor& x) {
              return reduce_sum(t, weighted_interpolate(t, x, f, 2, 3));
            },
            w, 1e-6) < 1e-6);
  CHECK(finite_difference_check(
            [&](Tape& t, const Tensor& x) {
              return reduce_sum(t, weighted_interpolate(t, w, x, 2, 3));
            },
            f, 1e-6) < 1e-6);
}

TEST_CASE("sp_propagate with a single source matches across weight modes") {
  Rng rng(97);
  LevelState target;
  target.features = random_tensor({5, 5}, rng);
  for (int i = 0; i < 5; ++i) {
    target.positions.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
    target.labels.push_back(static_cast<uint8_t>(rng.below(12)));
    target.kinds.push_back(VoxelKind::Occluded);
  }
  LevelState source;
  source.parent_index = {2};
  source.positions = {target.positions[2]};
  source.features = random_tensor({1, 8}, rng);
  source.labels = {target.labels[2]};
  source.kinds = {VoxelKind::Occluded};
  const Tensor source_dec = random_tensor({1, 8}, rng);

  // fp_mode only changes the weights; with one source the normalization
  // cancels them, so all three modes agree.
  PvaConfig sem = PvaConfig::tiny();
  PvaConfig inv = PvaConfig::tiny();
  inv.fp_mode = FpMode::InverseEuclidean;
  PvaConfig cos = PvaConfig::tiny();
  cos.fp_mode = FpMode::Cosine;
  PvaModel m_sem(sem, 101), m_inv(inv, 101), m_cos(cos, 101);

  Tape t1, t2, t3;
  const Tensor a = sp_propagate(t1, target, source, source_dec, m_sem, 0, FpMode::SemanticAware).features;
  const Tensor b = sp_propagate(t2, target, source, source_dec, m_inv, 0, FpMode::InverseEuclidean).features;
  const Tensor c = sp_propagate(t3, target, source, source_dec, m_cos, 0, FpMode::Cosine).features;
  REQUIRE(a.shape() == b.shape());
  for (int64_t i = 0; i < a.numel(); ++i) {
    CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-13));
    CHECK(a.data()[i] == doctest::Approx(c.data()[i]).epsilon(1e-13));
  }
}

TEST_CASE("forward_full: shapes, determinism, pair accounting, subset chain") {
  const TsdfVolume v = tiny_scene(3, {10, 8, 10});
  PvaConfig pc = PvaConfig::tiny();
  PvaModel model(pc, 103);

  Tape t1;
  Rng r1(55);
  const ForwardResult a = forward_full(t1, v, model, r1);
  const PointCloud cloud = generate_points(v);
  CHECK(a.logits.shape() == std::vector<int64_t>{cloud.size(), 12});

  // bitwise determinism under identical seeds
  Tape t2;
  Rng r2(55);
  const ForwardResult b = forward_full(t2, v, model, r2);
  CHECK(std::memcmp(a.logits.data(), b.logits.data(),
                    sizeof(double) * static_cast<size_t>(a.logits.numel())) == 0);

  // pair count is sum over levels of |X_l| * k_eff
  int64_t expected_pairs = 0;
  for (int l = 0; l < pc.n_sa_layers; ++l) {
    const int64_t k_eff =
        std::min<int64_t>(pc.fp_k, a.levels[static_cast<size_t>(l + 1)].size());
    expected_pairs += a.levels[static_cast<size_t>(l)].size() * k_eff;
  }
  CHECK(a.pair_count == expected_pairs);
  CHECK(a.sp_weights.numel() == expected_pairs);
  CHECK(a.sp_same_class.size() == static_cast<size_t>(expected_pairs));

  // level subset chain
  REQUIRE(a.levels.size() == static_cast<size_t>(pc.n_sa_layers) + 1);
  for (size_t l = 1; l < a.levels.size(); ++l) {
    CHECK(a.levels[l].size() <= a.levels[l - 1].size());
    for (int p : a.levels[l].parent_index) {
      CHECK(p >= 0);
      CHECK(p < a.levels[l - 1].size());
    }
  }

  // empty scene raises
  TsdfVolume blank = TsdfVolume::zeros({6, 4, 6});
  Tape t3;
  Rng r3(1);
  CHECK_THROWS_AS(forward_full(t3, blank, model, r3), ValueError);
}

TEST_CASE("pure point baseline runs without voxel or sp machinery") {
  const TsdfVolume v = tiny_scene(5, {10, 8, 10});
  PvaConfig pc = PvaConfig::tiny();
  pc.ava_mode = AvaMode::None;
  pc.fp_mode = FpMode::InverseEuclidean;
  PvaModel model(pc, 107);
  Tape tape;
  Rng rng(66);
  const ForwardResult fr = forward_full(tape, v, model, rng);
  CHECK(fr.logits.dim(1) == 12);
  CHECK(fr.pair_count > 0);
  CHECK_FALSE(fr.sp_weights.defined());
  Tape lt;
  const SpLossResult sp = sp_loss(lt, fr.sp_weights, fr.sp_same_class);
  CHECK(sp.empty_pairs);
}

TEST_CASE("nearest and spherical aggregation modes run end to end") {
  const TsdfVolume v = tiny_scene(7, {8, 8, 8});
  for (AvaMode mode : {AvaMode::Nearest, AvaMode::Spherical}) {
    PvaConfig pc = PvaConfig::tiny();
    pc.ava_mode = mode;
    PvaModel model(pc, 109);
    Tape tape;
    Rng rng(77);
    const ForwardResult fr = forward_full(tape, v, model, rng);
    const PointCloud cloud = generate_points(v);
    CHECK(fr.logits.shape() == std::vector<int64_t>{cloud.size(), 12});
    CHECK(fr.logits.all_finite());
  }
}

TEST_CASE("end-to-end loss gradients match finite differences per parameter group") {
  const TsdfVolume v = tiny_scene(11, {8, 8, 8});
  PvaConfig pc = PvaConfig::tiny();
  PvaModel model(pc, 113);
  const std::vector<int64_t> subset = spread_subset(v, 48);
  REQUIRE(subset.size() > 8);

  // analytic gradients
  model.zero_grads();
  Tape tape;
  Tensor loss = tiny_total_loss(tape, v, model, subset);
  tape.backward(loss);
  std::vector<std::vector<double>> analytic;
  for (Parameter& p : model.parameters())
    analytic.emplace_back(p.tensor.grad(), p.tensor.grad() + p.tensor.numel());

  Rng pick(127);
  double worst = 0.0;
  const double h = 1e-5;
  for (size_t pi = 0; pi < model.parameters().size(); ++pi) {
    Parameter& p = model.parameters()[pi];
    const int64_t coords = std::min<int64_t>(2, p.tensor.numel());
    for (int64_t t = 0; t < coords; ++t) {
      const int64_t i = static_cast<int64_t>(pick.below(static_cast<uint64_t>(p.tensor.numel())));
      const double saved = p.tensor.data()[i];
      p.tensor.data()[i] = saved + h;
      Tape tp;
      const double fp = tiny_total_loss(tp, v, model, subset).item();
      p.tensor.data()[i] = saved - h;
      Tape tm;
      const double fm = tiny_total_loss(tm, v, model, subset).item();
      p.tensor.data()[i] = saved;
      const double numeric = (fp - fm) / (2 * h);
      const double a = analytic[pi][static_cast<size_t>(i)];
      const double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
      worst = std::max(worst, rel);
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("lambda zero excludes the sp term from parameter gradients") {
  const TsdfVolume v = tiny_scene(13, {8, 8, 8});
  PvaConfig pc = PvaConfig::tiny();
  PvaModel model(pc, 131);
  const std::vector<int64_t> subset = spread_subset(v, 40);

  model.zero_grads();
  {
    Tape tape;
    Tensor loss = tiny_total_loss(tape, v, model, subset, /*lambda=*/0.0);
    tape.backward(loss);
  }
  std::vector<std::vector<double>> lam0;
  for (Parameter& p : model.parameters())
    lam0.emplace_back(p.tensor.grad(), p.tensor.grad() + p.tensor.numel());

  model.zero_grads();
  {
    Tape tape;
    Rng rng(777);
    ForwardResult fr = forward_full(tape, v, model, rng, &subset);
    Tensor ssc = ssc_loss(tape, fr.logits, fr.levels[0].labels);
    tape.backward(ssc);
  }
  for (size_t pi = 0; pi < model.parameters().size(); ++pi) {
    Parameter& p = model.parameters()[pi];
    for (int64_t i = 0; i < p.tensor.numel(); ++i)
      CHECK(lam0[pi][static_cast<size_t>(i)] ==
            doctest::Approx(p.tensor.grad()[i]).epsilon(1e-12));
  }
}
