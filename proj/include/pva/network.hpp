#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pva/rng.hpp"
#include "pva/spatial.hpp"
#include "pva/tensor.hpp"
#include "pva/volume.hpp"

namespace pva {

// How voxel-stream features are fused into the point stream.
enum class AvaMode { None, Nearest, Spherical, Anisotropic };

// How decoder interpolation weights are computed.
enum class FpMode { InverseEuclidean, Cosine, SemanticAware };

std::string to_string(AvaMode m);
std::string to_string(FpMode m);
AvaMode ava_mode_from_string(const std::string& s);
FpMode fp_mode_from_string(const std::string& s);

struct PvaConfig {
  int n_sa_layers = 4;
  std::vector<int> sa_sample_counts{1024, 256, 64, 16};
  std::vector<double> sa_radii{0.05, 0.10, 0.20, 0.40};
  std::vector<int> sa_group_caps{16, 16, 16, 16};
  std::vector<int> sa_channels{32, 64, 128, 256};
  std::vector<int> fp_channels{32, 32, 64, 128};  // decoder output width at level l

  std::vector<int> ava_positions{1};  // 1-based SA layer indices
  AvaMode ava_mode = AvaMode::Anisotropic;
  FpMode fp_mode = FpMode::SemanticAware;
  int fp_k = 3;

  double ellipsoid_minor_radius = 0.03;
  double ellipsoid_major_scale = 3.0;
  int ellipsoid_cap = 8;

  int voxel_stream_channels = 16;
  int ava_channels = 32;
  int sp_hidden = 32;
  int head_hidden = 32;
  int class_count = 11;

  void validate() const;
  bool uses_voxel_stream() const;
  bool has_ava_at(int layer) const;
  // Channels appended to a layer's pooled features by AVA fusion.
  int ava_extra_channels() const;

  // Canonical key=value text; stable across runs, used for the digest.
  std::string serialize() const;
  static PvaConfig deserialize(const std::string& text);
  uint64_t digest() const;

  static PvaConfig tiny();  // small widths for gradient-check scenes
};

// Index pair into the model's parameter registry.
struct LinearSpec {
  int w = -1;
  int b = -1;
};

// The assembled two-stream network. Parameters live in a flat registry with
// unique names; layer structs reference them by index so the optimizer and
// checkpoints see one ordered list.
class PvaModel {
 public:
  PvaModel(PvaConfig cfg, uint64_t seed);

  const PvaConfig& config() const { return cfg_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  Parameter& parameter(const std::string& name);
  void zero_grads();

  const Tensor& weight(const LinearSpec& l) const { return params_[static_cast<size_t>(l.w)].tensor; }
  const Tensor& bias(const LinearSpec& l) const { return params_[static_cast<size_t>(l.b)].tensor; }

  // Encoder feature width at level 0..n_sa_layers (post-AVA where fused).
  int level_width(int level) const;
  // Width of decoder features entering the propagation into level l.
  int decoder_source_width(int level) const;

  LinearSpec conv1, conv2;
  std::vector<std::vector<LinearSpec>> sa_mlps;        // [layer][2]
  std::map<int, std::array<LinearSpec, 3>> ava_dir;    // site -> phi_x, phi_y, phi_z
  std::map<int, LinearSpec> ava_sph;                   // site -> single phi
  std::vector<std::vector<LinearSpec>> fp_mlps;        // [level][2]
  std::vector<std::vector<LinearSpec>> sp_mlps;        // [level][hidden, out]
  std::vector<LinearSpec> head;                        // [hidden, out]

 private:
  LinearSpec add_linear(const std::string& name, int64_t in, int64_t out, int64_t fan_in,
                        Rng& rng);
  LinearSpec add_linear_shaped(const std::string& name, std::vector<int64_t> wshape,
                               int64_t out, int64_t fan_in, Rng& rng);
  PvaConfig cfg_;
  std::vector<Parameter> params_;
  std::map<std::string, int> by_name_;
};

// One level of the point hierarchy. parent_index maps each point to its row
// in the previous level (empty at level 0), which realizes the subset chain.
struct LevelState {
  std::vector<int> parent_index;
  std::vector<Vec3> positions;
  Tensor features;
  std::vector<uint8_t> labels;
  std::vector<VoxelKind> kinds;

  int64_t size() const { return static_cast<int64_t>(positions.size()); }
};

// Two same-padded 3x3x3 convolutions with a ReLU between them, over the
// single-channel TSDF grid. Returns [W*H*D, voxel_stream_channels].
Tensor voxel_stream_forward(Tape& tape, const TsdfVolume& v, const PvaModel& model);

// Sample centers by FPS, group ball neighbors (capped), run the per-point
// MLP on (relative position || neighbor feature) and max-pool per center.
LevelState sa_layer_forward(Tape& tape, const LevelState& in, int layer,
                            const PvaModel& model, Rng& rng);

// Query-space positions of all voxels, layout order (ids are flat indices).
std::vector<Vec3> voxel_positions(GridDims dims);

// Fuses voxel features into the center features according to mode; the
// returned tensor keeps the center features as the leading channels.
Tensor ava_forward(Tape& tape, std::span<const Vec3> centers, const Tensor& center_features,
                   const Tensor& voxel_features, const GridIndex& voxel_index,
                   const PvaModel& model, int site_layer, AvaMode mode, Rng& rng);

// Learned pairwise similarity sigma(phi(f_i || f_j)) for level-l features.
Tensor sp_pair_weights(Tape& tape, const Tensor& f_i, const Tensor& f_j,
                       const PvaModel& model, int level);

// Normalized weighted mean per group of k consecutive rows:
//   out[i] = sum_j w[i*k+j] f[i*k+j] / sum_j w[i*k+j]
// A vanishing weight sum falls back to the plain mean of the group.
Tensor weighted_interpolate(Tape& tape, const Tensor& w, const Tensor& feats, int64_t n,
                            int64_t k);

struct PropagateOutput {
  Tensor features;            // [n_l, fp_channels[l]]
  Tensor weights;             // [pairs, 1]; defined only in semantic-aware mode
  std::vector<int> pair_target;  // target row per pair (level l)
  std::vector<int> pair_source;  // source row per pair (level l+1)
  int neighbors_per_target = 0;
};

// Interpolates source-level decoder features into the target level (Eq.-3
// style normalized weighting), concatenates the target's skip features and
// applies the level's unit MLP.
PropagateOutput sp_propagate(Tape& tape, const LevelState& target, const LevelState& source,
                             const Tensor& source_features, const PvaModel& model, int level,
                             FpMode mode);

struct ForwardResult {
  Tensor logits;                     // [n, class_count+1]
  std::vector<LevelState> levels;    // [0..n_sa_layers]
  Tensor sp_weights;                 // stacked pair weights (semantic mode)
  std::vector<double> sp_same_class; // ground-truth indicator per pair
  int64_t pair_count = 0;            // propagation pairs across all levels
};

// Full two-stream pass over one scene. subset restricts the point stream to
// the given cloud rows (training batches); voxel_index, when provided, must
// be an index over voxel_positions(v.dims) with any positive cell size.
ForwardResult forward_full(Tape& tape, const TsdfVolume& v, const PvaModel& model, Rng& rng,
                           const std::vector<int64_t>* subset = nullptr,
                           const GridIndex* voxel_index = nullptr);

}  // namespace pva
