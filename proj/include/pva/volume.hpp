#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pva/error.hpp"
#include "pva/tensor.hpp"
#include "pva/vec3.hpp"

namespace pva {

// Visibility classification of a voxel with respect to the input camera.
enum class VoxelKind : uint8_t {
  VisibleEmpty = 0,    // on a camera ray before the first surface hit
  ObservedSurface = 1, // first non-empty voxel along a ray
  Occluded = 2,        // behind observed surfaces or outside the frustum
};

// W x H x D voxel counts; H is the height axis. Flat layout index is
// (x*H + y)*D + z.
struct GridDims {
  int w = 0, h = 0, d = 0;

  int64_t count() const { return static_cast<int64_t>(w) * h * d; }
  int64_t index(int x, int y, int z) const {
    return (static_cast<int64_t>(x) * h + y) * static_cast<int64_t>(d) + z;
  }
  bool operator==(const GridDims&) const = default;
};

// Dense scene volume: flipped TSDF, semantic label (0 = empty, 1..C = class)
// and voxel kind per cell. Also the in-memory form of an SSCB dataset
// record. Immutable by convention once filled.
struct TsdfVolume {
  GridDims dims;
  std::vector<float> tsdf;
  std::vector<uint8_t> label;
  std::vector<VoxelKind> kind;

  static TsdfVolume zeros(GridDims dims);
  void validate() const;
};

// Points generated from the non-visible-empty voxels of a volume. The
// feature rows are (x, y, z, t, h) with x,y,z mass-center normalized;
// positions keep the unnormalized query-space coordinates used by all
// spatial queries.
struct PointCloud {
  std::vector<Vec3> positions;
  Tensor features;  // [n, 5]
  std::vector<int64_t> src_voxel;
  std::vector<VoxelKind> kind;
  std::vector<uint8_t> label;

  int64_t size() const { return static_cast<int64_t>(positions.size()); }
};

// Query-space scale: one voxel step is 1/max(W, D).
double query_scale(GridDims dims);

// Query-space position of the voxel at integer index (x, y, z).
Vec3 voxel_position(GridDims dims, int x, int y, int z);

Vec3 mass_center(std::span<const Vec3> positions);

// One point per ObservedSurface or Occluded voxel, in layout order.
// rescale_centered additionally divides the centered x,y,z features by
// their max absolute value (off by default: subtract-only normalization).
PointCloud generate_points(const TsdfVolume& v, bool rescale_centered = false);

// Writes each point's argmax class into its source voxel; visible-empty
// voxels stay at the empty class.
std::vector<uint8_t> voxelize_predictions(const PointCloud& cloud, const Tensor& logits,
                                          GridDims dims);

}  // namespace pva
