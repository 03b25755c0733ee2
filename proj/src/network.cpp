#include "pva/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <sstream>

namespace pva {

std::string to_string(AvaMode m) {
  switch (m) {
    case AvaMode::None: return "none";
    case AvaMode::Nearest: return "nearest";
    case AvaMode::Spherical: return "spherical";
    case AvaMode::Anisotropic: return "anisotropic";
  }
  return "?";
}

std::string to_string(FpMode m) {
  switch (m) {
    case FpMode::InverseEuclidean: return "inverse_euclidean";
    case FpMode::Cosine: return "cosine";
    case FpMode::SemanticAware: return "semantic_aware";
  }
  return "?";
}

AvaMode ava_mode_from_string(const std::string& s) {
  if (s == "none") return AvaMode::None;
  if (s == "nearest") return AvaMode::Nearest;
  if (s == "spherical") return AvaMode::Spherical;
  if (s == "anisotropic") return AvaMode::Anisotropic;
  throw ValueError("unknown ava mode '" + s + "'");
}

FpMode fp_mode_from_string(const std::string& s) {
  if (s == "inverse_euclidean") return FpMode::InverseEuclidean;
  if (s == "cosine") return FpMode::Cosine;
  if (s == "semantic_aware") return FpMode::SemanticAware;
  throw ValueError("unknown fp mode '" + s + "'");
}

void PvaConfig::validate() const {
  const size_t n = static_cast<size_t>(n_sa_layers);
  if (n_sa_layers < 1) throw ValueError("need at least one SA layer");
  if (sa_sample_counts.size() != n || sa_radii.size() != n || sa_group_caps.size() != n ||
      sa_channels.size() != n || fp_channels.size() != n)
    throw ValueError("per-layer config vectors must have n_sa_layers entries");
  for (int c : sa_sample_counts)
    if (c < 1) throw ValueError("sample counts must be positive");
  for (double r : sa_radii)
    if (!(r > 0)) throw ValueError("SA radii must be positive");
  for (int c : sa_group_caps)
    if (c < 1) throw ValueError("group caps must be positive");
  for (int c : sa_channels)
    if (c < 1) throw ValueError("channel widths must be positive");
  for (int c : fp_channels)
    if (c < 1) throw ValueError("fp channel widths must be positive");
  for (int p : ava_positions)
    if (p < 1 || p > n_sa_layers)
      throw ValueError("ava position " + std::to_string(p) + " outside 1.." +
                       std::to_string(n_sa_layers));
  if (fp_k < 1) throw ValueError("fp_k must be >= 1");
  if (!(ellipsoid_minor_radius > 0)) throw ValueError("ellipsoid radius must be positive");
  if (!(ellipsoid_major_scale > 1)) throw ValueError("ellipsoid major scale must exceed 1");
  if (ellipsoid_cap < 1) throw ValueError("ellipsoid cap must be >= 1");
  if (uses_voxel_stream() && voxel_stream_channels < 1)
    throw ValueError("voxel stream needs at least one channel");
  if (ava_channels < 1 || sp_hidden < 1 || head_hidden < 1)
    throw ValueError("hidden widths must be positive");
  if (class_count < 1) throw ValueError("need at least one semantic class");
}

bool PvaConfig::uses_voxel_stream() const {
  return ava_mode != AvaMode::None && !ava_positions.empty();
}

bool PvaConfig::has_ava_at(int layer) const {
  return ava_mode != AvaMode::None &&
         std::find(ava_positions.begin(), ava_positions.end(), layer) != ava_positions.end();
}

int PvaConfig::ava_extra_channels() const {
  switch (ava_mode) {
    case AvaMode::None: return 0;
    case AvaMode::Nearest: return voxel_stream_channels;
    case AvaMode::Spherical:
    case AvaMode::Anisotropic: return ava_channels;
  }
  return 0;
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

template <typename T, typename F>
std::string join_list(const std::vector<T>& v, F&& fmt) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += fmt(v[i]);
  }
  return out;
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  if (s.empty()) return out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(std::stoi(tok));
  return out;
}

std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  if (s.empty()) return out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(std::stod(tok));
  return out;
}

}  // namespace

std::string PvaConfig::serialize() const {
  std::vector<int> pos = ava_positions;
  std::sort(pos.begin(), pos.end());
  auto fmt_i = [](int v) { return std::to_string(v); };
  std::ostringstream os;
  os << "ava_channels=" << ava_channels << '\n'
     << "ava_mode=" << to_string(ava_mode) << '\n'
     << "ava_positions=" << join_list(pos, fmt_i) << '\n'
     << "class_count=" << class_count << '\n'
     << "ellipsoid_cap=" << ellipsoid_cap << '\n'
     << "ellipsoid_major_scale=" << fmt_double(ellipsoid_major_scale) << '\n'
     << "ellipsoid_minor_radius=" << fmt_double(ellipsoid_minor_radius) << '\n'
     << "fp_channels=" << join_list(fp_channels, fmt_i) << '\n'
     << "fp_k=" << fp_k << '\n'
     << "fp_mode=" << to_string(fp_mode) << '\n'
     << "head_hidden=" << head_hidden << '\n'
     << "n_sa_layers=" << n_sa_layers << '\n'
     << "sa_channels=" << join_list(sa_channels, fmt_i) << '\n'
     << "sa_group_caps=" << join_list(sa_group_caps, fmt_i) << '\n'
     << "sa_radii=" << join_list(sa_radii, fmt_double) << '\n'
     << "sa_sample_counts=" << join_list(sa_sample_counts, fmt_i) << '\n'
     << "sp_hidden=" << sp_hidden << '\n'
     << "voxel_stream_channels=" << voxel_stream_channels << '\n';
  return os.str();
}

PvaConfig PvaConfig::deserialize(const std::string& text) {
  PvaConfig c;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("malformed config line: " + line);
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    try {
      if (key == "ava_channels") c.ava_channels = std::stoi(val);
      else if (key == "ava_mode") c.ava_mode = ava_mode_from_string(val);
      else if (key == "ava_positions") c.ava_positions = parse_int_list(val);
      else if (key == "class_count") c.class_count = std::stoi(val);
      else if (key == "ellipsoid_cap") c.ellipsoid_cap = std::stoi(val);
      else if (key == "ellipsoid_major_scale") c.ellipsoid_major_scale = std::stod(val);
      else if (key == "ellipsoid_minor_radius") c.ellipsoid_minor_radius = std::stod(val);
      else if (key == "fp_channels") c.fp_channels = parse_int_list(val);
      else if (key == "fp_k") c.fp_k = std::stoi(val);
      else if (key == "fp_mode") c.fp_mode = fp_mode_from_string(val);
      else if (key == "head_hidden") c.head_hidden = std::stoi(val);
      else if (key == "n_sa_layers") c.n_sa_layers = std::stoi(val);
      else if (key == "sa_channels") c.sa_channels = parse_int_list(val);
      else if (key == "sa_group_caps") c.sa_group_caps = parse_int_list(val);
      else if (key == "sa_radii") c.sa_radii = parse_double_list(val);
      else if (key == "sa_sample_counts") c.sa_sample_counts = parse_int_list(val);
      else if (key == "sp_hidden") c.sp_hidden = std::stoi(val);
      else if (key == "voxel_stream_channels") c.voxel_stream_channels = std::stoi(val);
      else throw FormatError("unknown config key '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw FormatError("bad value for config key '" + key + "'");
    }
  }
  return c;
}

uint64_t PvaConfig::digest() const {
  const std::string s = serialize();
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

PvaConfig PvaConfig::tiny() {
  PvaConfig c;
  c.sa_sample_counts = {16, 8, 4, 2};
  c.sa_radii = {0.25, 0.5, 1.0, 2.0};
  c.sa_group_caps = {8, 8, 8, 8};
  c.sa_channels = {8, 12, 16, 16};
  c.fp_channels = {8, 8, 12, 16};
  c.ellipsoid_minor_radius = 0.15;
  c.voxel_stream_channels = 4;
  c.ava_channels = 6;
  c.sp_hidden = 6;
  c.head_hidden = 8;
  c.fp_k = 2;
  return c;
}

LinearSpec PvaModel::add_linear(const std::string& name, int64_t in, int64_t out,
                                int64_t fan_in, Rng& rng) {
  return add_linear_shaped(name, {in, out}, out, fan_in, rng);
}

// Registers a weight of the given shape plus a bias of length `out`.
LinearSpec PvaModel::add_linear_shaped(const std::string& name, std::vector<int64_t> wshape,
                                       int64_t out, int64_t fan_in, Rng& rng) {
  LinearSpec spec;
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor w(std::move(wshape));
  for (int64_t i = 0; i < w.numel(); ++i) w.data()[i] = rng.uniform(-bound, bound);
  spec.w = static_cast<int>(params_.size());
  params_.emplace_back(name + ".w", std::move(w));
  spec.b = static_cast<int>(params_.size());
  params_.emplace_back(name + ".b", Tensor({out}));
  by_name_[name + ".w"] = spec.w;
  by_name_[name + ".b"] = spec.b;
  if (by_name_.size() != params_.size())
    throw ValueError("duplicate parameter name " + name);
  return spec;
}

PvaModel::PvaModel(PvaConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  std::sort(cfg_.ava_positions.begin(), cfg_.ava_positions.end());
  cfg_.ava_positions.erase(
      std::unique(cfg_.ava_positions.begin(), cfg_.ava_positions.end()),
      cfg_.ava_positions.end());
  cfg_.validate();
  Rng rng(Rng::mix(seed, 0x70a11e7));
  const int N = cfg_.n_sa_layers;
  const int cv = cfg_.voxel_stream_channels;

  if (cfg_.uses_voxel_stream()) {
    conv1 = add_linear_shaped("voxel.conv1", {3, 3, 3, 1, cv}, cv, 27, rng);
    conv2 = add_linear_shaped("voxel.conv2", {3, 3, 3, cv, cv}, cv, 27 * cv, rng);
  }

  for (int l = 1; l <= N; ++l) {
    const int in = 3 + level_width(l - 1);
    const int out = cfg_.sa_channels[static_cast<size_t>(l - 1)];
    const std::string base = "sa" + std::to_string(l);
    sa_mlps.push_back({add_linear(base + ".l1", in, out, in, rng),
                       add_linear(base + ".l2", out, out, out, rng)});
  }

  for (int site : cfg_.ava_positions) {
    const int cpt = cfg_.sa_channels[static_cast<size_t>(site - 1)];
    const std::string base = "ava" + std::to_string(site);
    if (cfg_.ava_mode == AvaMode::Anisotropic) {
      const int in = cpt + cv;
      ava_dir[site] = {add_linear(base + ".x", in, cfg_.ava_channels, in, rng),
                       add_linear(base + ".y", in, cfg_.ava_channels, in, rng),
                       add_linear(base + ".z", in, cfg_.ava_channels, in, rng)};
    } else if (cfg_.ava_mode == AvaMode::Spherical) {
      const int in = cpt + cv;
      ava_sph[site] = add_linear(base + ".sph", in, cfg_.ava_channels, in, rng);
    }
    // Nearest aggregation is parameter-free.
  }

  for (int l = 0; l < N; ++l) {
    const int in = decoder_source_width(l) + level_width(l);
    const int out = cfg_.fp_channels[static_cast<size_t>(l)];
    const std::string base = "fp" + std::to_string(l);
    fp_mlps.push_back({add_linear(base + ".l1", in, out, in, rng),
                       add_linear(base + ".l2", out, out, out, rng)});
  }

  if (cfg_.fp_mode == FpMode::SemanticAware) {
    for (int l = 0; l < N; ++l) {
      const int in = 2 * level_width(l);
      const std::string base = "sp" + std::to_string(l);
      sp_mlps.push_back({add_linear(base + ".l1", in, cfg_.sp_hidden, in, rng),
                         add_linear(base + ".l2", cfg_.sp_hidden, 1, cfg_.sp_hidden, rng)});
    }
  }

  head = {add_linear("head.l1", cfg_.fp_channels[0], cfg_.head_hidden, cfg_.fp_channels[0], rng),
          add_linear("head.l2", cfg_.head_hidden, cfg_.class_count + 1, cfg_.head_hidden, rng)};
}

Parameter& PvaModel::parameter(const std::string& name) {
  const auto it = by_name_.find(name);
  if (it == by_name_.end()) throw ValueError("no parameter named '" + name + "'");
  return params_[static_cast<size_t>(it->second)];
}

void PvaModel::zero_grads() {
  for (Parameter& p : params_) p.tensor.zero_grad();
}

int PvaModel::level_width(int level) const {
  if (level == 0) return 5;
  int w = cfg_.sa_channels[static_cast<size_t>(level - 1)];
  if (cfg_.has_ava_at(level)) w += cfg_.ava_extra_channels();
  return w;
}

int PvaModel::decoder_source_width(int level) const {
  return level + 1 == cfg_.n_sa_layers ? level_width(cfg_.n_sa_layers)
                                       : cfg_.fp_channels[static_cast<size_t>(level + 1)];
}

// --- internal autodiff nodes ----------------------------------------------

namespace {

// Rows of src selected by id; id < 0 yields a zero row. Backward scatters
// gradient back into src.
Tensor gather_rows(Tape& tape, const Tensor& src, std::vector<int64_t> ids) {
  if (src.rank() != 2) throw DimensionError("gather_rows expects [n,c]");
  const int64_t n = src.dim(0), c = src.dim(1);
  const int64_t m = static_cast<int64_t>(ids.size());
  Tensor out({m, c});
  const double* sp = src.data();
  double* op = out.data();
  for (int64_t i = 0; i < m; ++i) {
    const int64_t id = ids[static_cast<size_t>(i)];
    if (id < 0) continue;
    if (id >= n) throw IndexError("gather_rows id out of range");
    std::memcpy(op + i * c, sp + id * c, sizeof(double) * static_cast<size_t>(c));
  }
  if (src.is_constant()) return out.mark_constant();
  auto held = std::make_shared<std::vector<int64_t>>(std::move(ids));
  tape.record([src = src, out = out, held, m, c]() mutable {
    const double* g = out.grad();
    if (!g) return;
    double* gs = src.grad_accum();
    if (!gs) return;
    for (int64_t i = 0; i < m; ++i) {
      const int64_t id = (*held)[static_cast<size_t>(i)];
      if (id < 0) continue;
      for (int64_t j = 0; j < c; ++j) gs[id * c + j] += g[i * c + j];
    }
  });
  return out;
}

// Vertical stack of [n_i, c] tensors.
Tensor vstack(Tape& tape, const std::vector<Tensor>& parts) {
  int64_t total = 0;
  const int64_t c = parts.front().dim(1);
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.dim(1) != c) throw DimensionError("vstack: column mismatch");
    total += p.dim(0);
  }
  Tensor out = Tensor::uninitialized({total, c});
  int64_t row = 0;
  for (const Tensor& p : parts) {
    std::memcpy(out.data() + row * c, p.data(),
                sizeof(double) * static_cast<size_t>(p.numel()));
    row += p.dim(0);
  }
  auto held = std::make_shared<std::vector<Tensor>>(parts);
  tape.record([out = out, held, c]() mutable {
    const double* g = out.grad();
    if (!g) return;
    int64_t row = 0;
    for (Tensor& p : *held) {
      if (double* gp = p.grad_accum()) {
        for (int64_t i = 0; i < p.numel(); ++i) gp[i] += g[row * c + i];
      }
      row += p.dim(0);
    }
  });
  return out;
}

}  // namespace

// Normalized weighted mean per group of k consecutive rows. A vanishing
// weight sum falls back to the plain mean (with no gradient to the weights
// on that row).
Tensor weighted_interpolate(Tape& tape, const Tensor& w, const Tensor& feats, int64_t n,
                            int64_t k) {
  if (w.numel() != n * k || feats.rank() != 2 || feats.dim(0) != n * k)
    throw DimensionError("weighted_interpolate: expected " + std::to_string(n * k) +
                         " pairs");
  const int64_t c = feats.dim(1);
  Tensor out({n, c});
  auto sums = std::make_shared<std::vector<double>>(static_cast<size_t>(n), 0.0);
  const double* wp = w.data();
  const double* fp = feats.data();
  double* op = out.data();
  constexpr double tiny = 1e-12;
  for (int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < k; ++j) s += wp[i * k + j];
    (*sums)[static_cast<size_t>(i)] = s;
    double* orow = op + i * c;
    if (s < tiny) {
      for (int64_t j = 0; j < k; ++j)
        for (int64_t q = 0; q < c; ++q) orow[q] += fp[(i * k + j) * c + q] / static_cast<double>(k);
    } else {
      for (int64_t j = 0; j < k; ++j) {
        const double wj = wp[i * k + j] / s;
        const double* frow = fp + (i * k + j) * c;
        for (int64_t q = 0; q < c; ++q) orow[q] += wj * frow[q];
      }
    }
  }
  if (w.is_constant() && feats.is_constant()) return out.mark_constant();
  tape.record([w = w, feats = feats, out = out, sums, n, k, c]() mutable {
    const double* g = out.grad();
    if (!g) return;
    double* gw = w.grad_accum();
    double* gf = feats.grad_accum();
    const double* wp = w.data();
    const double* fp = feats.data();
    const double* op = out.data();
    for (int64_t i = 0; i < n; ++i) {
      const double s = (*sums)[static_cast<size_t>(i)];
      const double* grow = g + i * c;
      if (s < tiny) {
        if (gf)
          for (int64_t j = 0; j < k; ++j)
            for (int64_t q = 0; q < c; ++q)
              gf[(i * k + j) * c + q] += grow[q] / static_cast<double>(k);
        continue;
      }
      const double* orow = op + i * c;
      for (int64_t j = 0; j < k; ++j) {
        const double* frow = fp + (i * k + j) * c;
        const double wj = wp[i * k + j];
        double dw = 0.0;
        for (int64_t q = 0; q < c; ++q) dw += grow[q] * (frow[q] - orow[q]);
        if (gf) {
          double* gfrow = gf + (i * k + j) * c;
          for (int64_t q = 0; q < c; ++q) gfrow[q] += grow[q] * wj / s;
        }
        if (gw) gw[i * k + j] += dw / s;
      }
    }
  });
  return out;
}

namespace {

// Per-row cosine similarity clipped at zero plus a small floor, so the
// weight is always positive. Gradients flow only through the positive,
// well-conditioned branch.
Tensor cosine_pair_weights(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.rank() != 2)
    throw DimensionError("cosine_pair_weights expects matching [n,c]");
  const int64_t n = a.dim(0), c = a.dim(1);
  constexpr double floor_w = 1e-8;
  constexpr double tiny = 1e-12;
  Tensor out = Tensor::uninitialized({n, 1});
  const double* ap = a.data();
  const double* bp = b.data();
  for (int64_t i = 0; i < n; ++i) {
    const double* ar = ap + i * c;
    const double* br = bp + i * c;
    double d = 0, na = 0, nb = 0;
    for (int64_t q = 0; q < c; ++q) {
      d += ar[q] * br[q];
      na += ar[q] * ar[q];
      nb += br[q] * br[q];
    }
    const double denom = std::sqrt(na) * std::sqrt(nb);
    const double cosv = denom > tiny ? d / denom : 0.0;
    out.data()[i] = std::max(cosv, 0.0) + floor_w;
  }
  if (a.is_constant() && b.is_constant()) return out.mark_constant();
  tape.record([a = a, b = b, out = out, n, c]() mutable {
    const double* g = out.grad();
    if (!g) return;
    double* ga = a.grad_accum();
    double* gb = b.grad_accum();
    const double* ap = a.data();
    const double* bp = b.data();
    for (int64_t i = 0; i < n; ++i) {
      const double* ar = ap + i * c;
      const double* br = bp + i * c;
      double d = 0, na2 = 0, nb2 = 0;
      for (int64_t q = 0; q < c; ++q) {
        d += ar[q] * br[q];
        na2 += ar[q] * ar[q];
        nb2 += br[q] * br[q];
      }
      const double na = std::sqrt(na2), nb = std::sqrt(nb2);
      const double denom = na * nb;
      if (denom <= tiny) continue;
      const double cosv = d / denom;
      if (cosv <= 0.0) continue;
      const double gi = g[i];
      for (int64_t q = 0; q < c; ++q) {
        if (ga) ga[i * c + q] += gi * (br[q] / denom - cosv * ar[q] / na2);
        if (gb) gb[i * c + q] += gi * (ar[q] / denom - cosv * br[q] / nb2);
      }
    }
  });
  return out;
}

// Same-padded 3x3x3 convolution over a [W*H*D, ci] grid tensor.
Tensor conv3d_same(Tape& tape, const Tensor& in, GridDims dims, const Tensor& w,
                   const Tensor& b) {
  const int64_t ci = w.dim(3), co = w.dim(4);
  if (in.rank() != 2 || in.dim(0) != dims.count() || in.dim(1) != ci)
    throw DimensionError("conv3d: input " + shape_string(in.shape()) +
                         " does not match grid/kernel");
  Tensor out = Tensor::uninitialized({dims.count(), co});
  const double* ip = in.data();
  const double* wp = w.data();
  const double* bp = b.data();
  double* op = out.data();
  for (int x = 0; x < dims.w; ++x)
    for (int y = 0; y < dims.h; ++y)
      for (int z = 0; z < dims.d; ++z) {
        double* orow = op + dims.index(x, y, z) * co;
        for (int64_t j = 0; j < co; ++j) orow[j] = bp[j];
        for (int dx = -1; dx <= 1; ++dx) {
          const int nx = x + dx;
          if (nx < 0 || nx >= dims.w) continue;
          for (int dy = -1; dy <= 1; ++dy) {
            const int ny = y + dy;
            if (ny < 0 || ny >= dims.h) continue;
            for (int dz = -1; dz <= 1; ++dz) {
              const int nz = z + dz;
              if (nz < 0 || nz >= dims.d) continue;
              const int tap = ((dx + 1) * 3 + (dy + 1)) * 3 + (dz + 1);
              const double* irow = ip + dims.index(nx, ny, nz) * ci;
              const double* wt = wp + static_cast<int64_t>(tap) * ci * co;
              for (int64_t q = 0; q < ci; ++q) {
                const double a = irow[q];
                const double* wrow = wt + q * co;
                for (int64_t j = 0; j < co; ++j) orow[j] += a * wrow[j];
              }
            }
          }
        }
      }
  tape.record([in = in, w = w, b = b, out = out, dims, ci, co]() mutable {
    const double* g = out.grad();
    if (!g) return;
    double* gi = in.grad_accum();
    double* gw = w.grad_accum();
    double* gb = b.grad_accum();
    const double* ip = in.data();
    const double* wp = w.data();
    for (int x = 0; x < dims.w; ++x)
      for (int y = 0; y < dims.h; ++y)
        for (int z = 0; z < dims.d; ++z) {
          const double* grow = g + dims.index(x, y, z) * co;
          if (gb)
            for (int64_t j = 0; j < co; ++j) gb[j] += grow[j];
          for (int dx = -1; dx <= 1; ++dx) {
            const int nx = x + dx;
            if (nx < 0 || nx >= dims.w) continue;
            for (int dy = -1; dy <= 1; ++dy) {
              const int ny = y + dy;
              if (ny < 0 || ny >= dims.h) continue;
              for (int dz = -1; dz <= 1; ++dz) {
                const int nz = z + dz;
                if (nz < 0 || nz >= dims.d) continue;
                const int tap = ((dx + 1) * 3 + (dy + 1)) * 3 + (dz + 1);
                const int64_t nidx = dims.index(nx, ny, nz);
                const double* irow = ip + nidx * ci;
                double* girow = gi ? gi + nidx * ci : nullptr;
                const double* wt = wp + static_cast<int64_t>(tap) * ci * co;
                double* gwt = gw ? gw + static_cast<int64_t>(tap) * ci * co : nullptr;
                for (int64_t q = 0; q < ci; ++q) {
                  const double a = irow[q];
                  const double* wrow = wt + q * co;
                  double* gwrow = gwt + q * co;
                  if (gi && gw) {
                    double acc = 0.0;
                    for (int64_t j = 0; j < co; ++j) {
                      acc += grow[j] * wrow[j];
                      gwrow[j] += a * grow[j];
                    }
                    girow[q] += acc;
                  } else if (gw) {
                    for (int64_t j = 0; j < co; ++j) gwrow[j] += a * grow[j];
                  } else if (gi) {
                    double acc = 0.0;
                    for (int64_t j = 0; j < co; ++j) acc += grow[j] * wrow[j];
                    girow[q] += acc;
                  }
                }
              }
            }
          }
        }
  });
  return out;
}

Tensor apply_mlp(Tape& tape, const PvaModel& model, const std::vector<LinearSpec>& layers,
                 const Tensor& x, bool relu_last) {
  Tensor h = x;
  for (size_t i = 0; i < layers.size(); ++i) {
    h = linear(tape, h, model.weight(layers[i]), model.bias(layers[i]));
    if (relu_last || i + 1 < layers.size()) h = relu(tape, h);
  }
  return h;
}

}  // namespace

// --- forward passes ---------------------------------------------------------

Tensor voxel_stream_forward(Tape& tape, const TsdfVolume& v, const PvaModel& model) {
  if (!model.config().uses_voxel_stream())
    throw ValueError("voxel stream disabled by configuration");
  const int64_t n = v.dims.count();
  Tensor x({n, 1});
  for (int64_t i = 0; i < n; ++i) x.data()[i] = v.tsdf[static_cast<size_t>(i)];
  x.mark_constant();
  Tensor h = conv3d_same(tape, x, v.dims, model.weight(model.conv1), model.bias(model.conv1));
  h = relu(tape, h);
  return conv3d_same(tape, h, v.dims, model.weight(model.conv2), model.bias(model.conv2));
}

LevelState sa_layer_forward(Tape& tape, const LevelState& in, int layer,
                            const PvaModel& model, Rng& rng) {
  const PvaConfig& cfg = model.config();
  if (layer < 1 || layer > cfg.n_sa_layers) throw ValueError("SA layer out of range");
  if (in.size() == 0) throw ValueError("SA layer on an empty level");
  const size_t li = static_cast<size_t>(layer - 1);
  const int m = std::min<int>(cfg.sa_sample_counts[li], static_cast<int>(in.size()));
  const int cap = cfg.sa_group_caps[li];
  const double radius = cfg.sa_radii[li];

  const std::vector<int> picks = farthest_point_sampling(in.positions, m, rng.next_u64());
  const GridIndex index(in.positions, radius);

  LevelState out;
  out.parent_index = picks;
  out.positions.reserve(static_cast<size_t>(m));
  out.labels.reserve(static_cast<size_t>(m));
  out.kinds.reserve(static_cast<size_t>(m));
  std::vector<std::vector<int>> groups(static_cast<size_t>(m));
  size_t cap_eff = 1;
  for (int i = 0; i < m; ++i) {
    const int pick = picks[static_cast<size_t>(i)];
    const Vec3 center = in.positions[static_cast<size_t>(pick)];
    out.positions.push_back(center);
    out.labels.push_back(in.labels[static_cast<size_t>(pick)]);
    out.kinds.push_back(in.kinds[static_cast<size_t>(pick)]);

    std::vector<int> nbrs = index.query_ball(center, radius);
    const uint64_t sub_seed = rng.next_u64();
    groups[static_cast<size_t>(i)] = subsample_capped(nbrs, cap, sub_seed);
    cap_eff = std::max(cap_eff, groups[static_cast<size_t>(i)].size());
  }

  // Slot tensors sized to the largest group actually present.
  std::vector<int64_t> slot_ids(static_cast<size_t>(m) * cap_eff, -1);
  std::vector<uint8_t> mask(static_cast<size_t>(m) * cap_eff, 0);
  Tensor relpos({static_cast<int64_t>(m) * static_cast<int64_t>(cap_eff), 3});
  relpos.mark_constant();
  double* rp = relpos.data();
  for (int i = 0; i < m; ++i) {
    const Vec3& center = out.positions[static_cast<size_t>(i)];
    const std::vector<int>& nbrs = groups[static_cast<size_t>(i)];
    for (size_t s = 0; s < nbrs.size(); ++s) {
      const size_t slot = static_cast<size_t>(i) * cap_eff + s;
      slot_ids[slot] = nbrs[s];
      mask[slot] = 1;
      const Vec3 rel = in.positions[static_cast<size_t>(nbrs[s])] - center;
      rp[slot * 3 + 0] = rel[0];
      rp[slot * 3 + 1] = rel[1];
      rp[slot * 3 + 2] = rel[2];
    }
  }

  Tensor gathered = gather_rows(tape, in.features, std::move(slot_ids));
  Tensor grouped = concat_channels(tape, relpos, gathered);
  Tensor h = apply_mlp(tape, model, model.sa_mlps[li], grouped, /*relu_last=*/true);
  const int64_t c_out = h.dim(1);
  out.features = masked_max_pool(
      tape, h.reshaped({m, static_cast<int64_t>(cap_eff), c_out}), mask);
  return out;
}

std::vector<Vec3> voxel_positions(GridDims dims) {
  std::vector<Vec3> out;
  out.reserve(static_cast<size_t>(dims.count()));
  for (int x = 0; x < dims.w; ++x)
    for (int y = 0; y < dims.h; ++y)
      for (int z = 0; z < dims.d; ++z) out.push_back(voxel_position(dims, x, y, z));
  return out;
}

namespace {

// Shared grouping path for spherical and anisotropic aggregation.
Tensor pooled_voxel_group(Tape& tape, std::span<const Vec3> centers,
                          const Tensor& center_features, const Tensor& voxel_features,
                          const PvaModel& model, const LinearSpec& phi,
                          const std::vector<std::vector<int>>& groups) {
  const int64_t m = static_cast<int64_t>(centers.size());
  size_t cap_eff = 1;
  for (const std::vector<int>& g : groups) cap_eff = std::max(cap_eff, g.size());
  std::vector<int64_t> voxel_ids(static_cast<size_t>(m) * cap_eff, -1);
  std::vector<int64_t> center_ids(static_cast<size_t>(m) * cap_eff, -1);
  std::vector<uint8_t> mask(static_cast<size_t>(m) * cap_eff, 0);
  for (int64_t i = 0; i < m; ++i) {
    const std::vector<int>& g = groups[static_cast<size_t>(i)];
    for (size_t s = 0; s < g.size(); ++s) {
      const size_t slot = static_cast<size_t>(i) * cap_eff + s;
      voxel_ids[slot] = g[s];
      center_ids[slot] = i;
      mask[slot] = 1;
    }
  }
  Tensor point_rows = gather_rows(tape, center_features, std::move(center_ids));
  Tensor voxel_rows = gather_rows(tape, voxel_features, std::move(voxel_ids));
  Tensor pairs = concat_channels(tape, point_rows, voxel_rows);
  Tensor h = linear(tape, pairs, model.weight(phi), model.bias(phi));
  h = relu(tape, h);
  return masked_max_pool(tape, h.reshaped({m, static_cast<int64_t>(cap_eff), h.dim(1)}), mask);
}

}  // namespace

Tensor ava_forward(Tape& tape, std::span<const Vec3> centers, const Tensor& center_features,
                   const Tensor& voxel_features, const GridIndex& voxel_index,
                   const PvaModel& model, int site_layer, AvaMode mode, Rng& rng) {
  if (mode == AvaMode::None) return center_features;
  const PvaConfig& cfg = model.config();
  const int64_t m = static_cast<int64_t>(centers.size());
  const double r = cfg.ellipsoid_minor_radius;
  const double k = cfg.ellipsoid_major_scale;
  const int cap = cfg.ellipsoid_cap;

  if (mode == AvaMode::Nearest) {
    std::vector<int64_t> ids(static_cast<size_t>(m), -1);
    for (int64_t i = 0; i < m; ++i) {
      const std::vector<int> nn = voxel_index.knn(centers[static_cast<size_t>(i)], 1);
      ids[static_cast<size_t>(i)] = nn.front();
    }
    Tensor voxel_rows = gather_rows(tape, voxel_features, std::move(ids));
    return concat_channels(tape, center_features, voxel_rows);
  }

  if (mode == AvaMode::Spherical) {
    std::vector<std::vector<int>> groups(static_cast<size_t>(m));
    for (int64_t i = 0; i < m; ++i) {
      std::vector<int> n = voxel_index.query_ball(centers[static_cast<size_t>(i)], k * r);
      groups[static_cast<size_t>(i)] = subsample_capped(n, cap, rng.next_u64());
    }
    Tensor pooled = pooled_voxel_group(tape, centers, center_features, voxel_features,
                                       model, model.ava_sph.at(site_layer), groups);
    return concat_channels(tape, center_features, pooled);
  }

  // Anisotropic: one ellipsoid per axis, summed after pooling.
  const auto& dir = model.ava_dir.at(site_layer);
  Tensor fused;
  for (int axis = 0; axis < 3; ++axis) {
    std::vector<std::vector<int>> groups(static_cast<size_t>(m));
    for (int64_t i = 0; i < m; ++i) {
      EllipsoidQuery q;
      q.center = centers[static_cast<size_t>(i)];
      q.minor_radius = r;
      q.major_scale = k;
      q.major_axis = static_cast<Axis>(axis);
      std::vector<int> n = voxel_index.query_ellipsoid(q);
      groups[static_cast<size_t>(i)] = subsample_capped(n, cap, rng.next_u64());
    }
    Tensor pooled = pooled_voxel_group(tape, centers, center_features, voxel_features,
                                       model, dir[static_cast<size_t>(axis)], groups);
    fused = fused.defined() ? add(tape, fused, pooled) : pooled;
  }
  return concat_channels(tape, center_features, fused);
}

Tensor sp_pair_weights(Tape& tape, const Tensor& f_i, const Tensor& f_j,
                       const PvaModel& model, int level) {
  if (model.sp_mlps.empty())
    throw ValueError("semantic-aware weights need fp_mode=semantic_aware");
  Tensor pairs = concat_channels(tape, f_i, f_j);
  Tensor h = apply_mlp(tape, model, model.sp_mlps[static_cast<size_t>(level)], pairs,
                       /*relu_last=*/false);
  return sigmoid(tape, h);
}

PropagateOutput sp_propagate(Tape& tape, const LevelState& target, const LevelState& source,
                             const Tensor& source_features, const PvaModel& model, int level,
                             FpMode mode) {
  const PvaConfig& cfg = model.config();
  const int64_t n = target.size();
  const int64_t ns = source.size();
  if (n == 0 || ns == 0) throw ValueError("sp_propagate on an empty level");
  const int k_eff = static_cast<int>(std::min<int64_t>(cfg.fp_k, ns));
  const GridIndex sidx(source.positions, cfg.sa_radii[static_cast<size_t>(level)]);

  PropagateOutput out;
  out.neighbors_per_target = k_eff;
  out.pair_target.reserve(static_cast<size_t>(n) * k_eff);
  out.pair_source.reserve(static_cast<size_t>(n) * k_eff);
  std::vector<double> inv_dist;
  inv_dist.reserve(static_cast<size_t>(n) * k_eff);
  for (int64_t i = 0; i < n; ++i) {
    const Vec3& p = target.positions[static_cast<size_t>(i)];
    const std::vector<int> nn = sidx.knn(p, k_eff);
    for (int j : nn) {
      out.pair_target.push_back(static_cast<int>(i));
      out.pair_source.push_back(j);
      const double dist = std::sqrt(dist2(p, source.positions[static_cast<size_t>(j)]));
      inv_dist.push_back(1.0 / (dist + 1e-8));
    }
  }
  const int64_t pairs = static_cast<int64_t>(out.pair_target.size());

  Tensor weights;
  if (mode == FpMode::InverseEuclidean) {
    weights = Tensor({pairs, 1}, std::move(inv_dist));
    weights.mark_constant();
  } else {
    // Both endpoints are compared in the target level's feature space: a
    // source point exists there too, through its parent index.
    std::vector<int64_t> ti(static_cast<size_t>(pairs)), tj(static_cast<size_t>(pairs));
    for (int64_t p = 0; p < pairs; ++p) {
      ti[static_cast<size_t>(p)] = out.pair_target[static_cast<size_t>(p)];
      tj[static_cast<size_t>(p)] =
          source.parent_index[static_cast<size_t>(out.pair_source[static_cast<size_t>(p)])];
    }
    Tensor fi = gather_rows(tape, target.features, std::move(ti));
    Tensor fj = gather_rows(tape, target.features, std::move(tj));
    weights = mode == FpMode::Cosine ? cosine_pair_weights(tape, fi, fj)
                                     : sp_pair_weights(tape, fi, fj, model, level);
  }

  std::vector<int64_t> src_ids(out.pair_source.begin(), out.pair_source.end());
  Tensor src_rows = gather_rows(tape, source_features, std::move(src_ids));
  Tensor interp = weighted_interpolate(tape, weights, src_rows, n, k_eff);
  Tensor cat = concat_channels(tape, interp, target.features);
  out.features = apply_mlp(tape, model, model.fp_mlps[static_cast<size_t>(level)], cat,
                           /*relu_last=*/true);
  if (mode == FpMode::SemanticAware) out.weights = weights;
  return out;
}

ForwardResult forward_full(Tape& tape, const TsdfVolume& v, const PvaModel& model, Rng& rng,
                           const std::vector<int64_t>* subset, const GridIndex* voxel_index) {
  const PvaConfig& cfg = model.config();
  const PointCloud cloud = generate_points(v);
  if (cloud.size() == 0) throw ValueError("empty scene: no observed or occluded voxels");

  LevelState l0;
  if (subset) {
    const int64_t n = static_cast<int64_t>(subset->size());
    if (n == 0) throw ValueError("empty training subset");
    l0.positions.reserve(static_cast<size_t>(n));
    l0.labels.reserve(static_cast<size_t>(n));
    l0.kinds.reserve(static_cast<size_t>(n));
    l0.features = Tensor({n, 5});
    for (int64_t i = 0; i < n; ++i) {
      const int64_t id = (*subset)[static_cast<size_t>(i)];
      if (id < 0 || id >= cloud.size())
        throw IndexError("subset index " + std::to_string(id) + " out of range");
      l0.positions.push_back(cloud.positions[static_cast<size_t>(id)]);
      l0.labels.push_back(cloud.label[static_cast<size_t>(id)]);
      l0.kinds.push_back(cloud.kind[static_cast<size_t>(id)]);
      std::memcpy(l0.features.data() + i * 5, cloud.features.data() + id * 5,
                  sizeof(double) * 5);
    }
  } else {
    l0.positions = cloud.positions;
    l0.features = cloud.features;
    l0.labels = cloud.label;
    l0.kinds = cloud.kind;
  }
  l0.features.mark_constant();

  ForwardResult res;
  res.levels.push_back(std::move(l0));

  Tensor vox_feats;
  std::optional<GridIndex> own_index;
  const GridIndex* vidx = voxel_index;
  if (cfg.uses_voxel_stream()) {
    vox_feats = voxel_stream_forward(tape, v, model);
    if (!vidx) {
      own_index.emplace(voxel_positions(v.dims), cfg.ellipsoid_minor_radius);
      vidx = &*own_index;
    }
  }

  for (int layer = 1; layer <= cfg.n_sa_layers; ++layer) {
    LevelState lv = sa_layer_forward(tape, res.levels.back(), layer, model, rng);
    if (cfg.has_ava_at(layer)) {
      lv.features = ava_forward(tape, lv.positions, lv.features, vox_feats, *vidx, model,
                                layer, cfg.ava_mode, rng);
    }
    res.levels.push_back(std::move(lv));
  }

  Tensor dec = res.levels.back().features;
  std::vector<Tensor> weight_parts;
  for (int level = cfg.n_sa_layers - 1; level >= 0; --level) {
    PropagateOutput out =
        sp_propagate(tape, res.levels[static_cast<size_t>(level)],
                     res.levels[static_cast<size_t>(level + 1)], dec, model, level, cfg.fp_mode);
    dec = out.features;
    res.pair_count += static_cast<int64_t>(out.pair_target.size());
    if (cfg.fp_mode == FpMode::SemanticAware) {
      weight_parts.push_back(out.weights);
      const LevelState& tgt = res.levels[static_cast<size_t>(level)];
      const LevelState& src = res.levels[static_cast<size_t>(level + 1)];
      for (size_t p = 0; p < out.pair_target.size(); ++p) {
        const bool same = tgt.labels[static_cast<size_t>(out.pair_target[p])] ==
                          src.labels[static_cast<size_t>(out.pair_source[p])];
        res.sp_same_class.push_back(same ? 1.0 : 0.0);
      }
    }
  }

  res.logits = apply_mlp(tape, model, model.head, dec, /*relu_last=*/false);
  if (!weight_parts.empty()) res.sp_weights = vstack(tape, weight_parts);
  return res;
}

}  // namespace pva
