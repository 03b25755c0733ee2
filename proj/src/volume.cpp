#include "pva/volume.hpp"

#include <algorithm>
#include <cmath>

namespace pva {

TsdfVolume TsdfVolume::zeros(GridDims d) {
  TsdfVolume v;
  v.dims = d;
  const size_t n = static_cast<size_t>(d.count());
  v.tsdf.assign(n, 0.0f);
  v.label.assign(n, 0);
  v.kind.assign(n, VoxelKind::VisibleEmpty);
  return v;
}

void TsdfVolume::validate() const {
  if (dims.w <= 0 || dims.h <= 0 || dims.d <= 0)
    throw ValueError("volume dims must be positive");
  const size_t n = static_cast<size_t>(dims.count());
  if (tsdf.size() != n || label.size() != n || kind.size() != n)
    throw DimensionError("volume array lengths do not match dims");
  for (float t : tsdf)
    if (!std::isfinite(t)) throw NumericError("non-finite TSDF value");
}

double query_scale(GridDims dims) { return 1.0 / static_cast<double>(std::max(dims.w, dims.d)); }

Vec3 voxel_position(GridDims dims, int x, int y, int z) {
  const double s = query_scale(dims);
  return {x * s, y * s, z * s};
}

Vec3 mass_center(std::span<const Vec3> positions) {
  if (positions.empty()) throw ValueError("mass_center of an empty point set");
  Vec3 acc{0, 0, 0};
  for (const Vec3& p : positions) acc = acc + p;
  return acc * (1.0 / static_cast<double>(positions.size()));
}

PointCloud generate_points(const TsdfVolume& v, bool rescale_centered) {
  v.validate();
  PointCloud cloud;
  std::vector<double> heights;
  std::vector<double> tsdfs;
  for (int x = 0; x < v.dims.w; ++x)
    for (int y = 0; y < v.dims.h; ++y)
      for (int z = 0; z < v.dims.d; ++z) {
        const int64_t idx = v.dims.index(x, y, z);
        if (v.kind[static_cast<size_t>(idx)] == VoxelKind::VisibleEmpty) continue;
        cloud.positions.push_back(voxel_position(v.dims, x, y, z));
        cloud.src_voxel.push_back(idx);
        cloud.kind.push_back(v.kind[static_cast<size_t>(idx)]);
        cloud.label.push_back(v.label[static_cast<size_t>(idx)]);
        heights.push_back(static_cast<double>(y) / static_cast<double>(v.dims.h));
        tsdfs.push_back(static_cast<double>(v.tsdf[static_cast<size_t>(idx)]));
      }

  const int64_t n = cloud.size();
  cloud.features = Tensor({n, 5});
  if (n == 0) return cloud;

  const Vec3 center = mass_center(cloud.positions);
  double max_abs = 0.0;
  if (rescale_centered) {
    for (const Vec3& p : cloud.positions)
      for (int a = 0; a < 3; ++a) max_abs = std::max(max_abs, std::abs(p[a] - center[a]));
  }
  const double inv_scale = (rescale_centered && max_abs > 0.0) ? 1.0 / max_abs : 1.0;

  double* f = cloud.features.data();
  for (int64_t i = 0; i < n; ++i) {
    const Vec3& p = cloud.positions[static_cast<size_t>(i)];
    f[i * 5 + 0] = (p[0] - center[0]) * inv_scale;
    f[i * 5 + 1] = (p[1] - center[1]) * inv_scale;
    f[i * 5 + 2] = (p[2] - center[2]) * inv_scale;
    f[i * 5 + 3] = tsdfs[static_cast<size_t>(i)];
    f[i * 5 + 4] = heights[static_cast<size_t>(i)];
  }
  return cloud;
}

std::vector<uint8_t> voxelize_predictions(const PointCloud& cloud, const Tensor& logits,
                                          GridDims dims) {
  if (logits.rank() != 2 || logits.dim(0) != cloud.size())
    throw DimensionError("voxelize_predictions: logits shape " +
                         shape_string(logits.shape()) + " for " +
                         std::to_string(cloud.size()) + " points");
  const int64_t classes = logits.dim(1);
  std::vector<uint8_t> out(static_cast<size_t>(dims.count()), 0);
  const double* lp = logits.data();
  for (int64_t i = 0; i < cloud.size(); ++i) {
    const int64_t voxel = cloud.src_voxel[static_cast<size_t>(i)];
    if (voxel < 0 || voxel >= dims.count())
      throw IndexError("source voxel " + std::to_string(voxel) + " outside volume of " +
                       std::to_string(dims.count()) + " cells");
    const double* row = lp + i * classes;
    int best = 0;
    for (int64_t c = 1; c < classes; ++c)
      if (row[c] > row[best]) best = static_cast<int>(c);
    out[static_cast<size_t>(voxel)] = static_cast<uint8_t>(best);
  }
  return out;
}

}  // namespace pva
