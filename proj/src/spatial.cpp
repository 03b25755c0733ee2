#include "pva/spatial.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace pva {

namespace {
// Cap on the dense cell box; the cell size grows to stay under it.
constexpr int64_t kMaxCells = int64_t(1) << 22;
}  // namespace

GridIndex::GridIndex(std::vector<Vec3> positions, double cell_size)
    : cell_size_(cell_size), items_(std::move(positions)) {
  if (!(cell_size > 0.0))
    throw ValueError("cell_size must be positive, got " + std::to_string(cell_size));
  if (items_.empty()) return;

  Vec3 hi = items_[0];
  origin_ = items_[0];
  for (const Vec3& p : items_)
    for (int a = 0; a < 3; ++a) {
      origin_[a] = std::min(origin_[a], p[a]);
      hi[a] = std::max(hi[a], p[a]);
    }

  auto cells_needed = [&](double cs) {
    int64_t total = 1;
    for (int a = 0; a < 3; ++a)
      total *= static_cast<int64_t>(std::floor((hi[a] - origin_[a]) / cs)) + 1;
    return total;
  };
  while (cells_needed(cell_size_) > kMaxCells) cell_size_ *= 2.0;

  nx_ = static_cast<int32_t>(std::floor((hi[0] - origin_[0]) / cell_size_)) + 1;
  ny_ = static_cast<int32_t>(std::floor((hi[1] - origin_[1]) / cell_size_)) + 1;
  nz_ = static_cast<int32_t>(std::floor((hi[2] - origin_[2]) / cell_size_)) + 1;

  // counting sort into CSR: count, prefix-sum, fill
  const int64_t cells = static_cast<int64_t>(nx_) * ny_ * nz_;
  starts_.assign(static_cast<size_t>(cells) + 1, 0);
  std::vector<int64_t> cell_of_item(items_.size());
  for (size_t i = 0; i < items_.size(); ++i) {
    const Cell c = cell_of(items_[i]);
    cell_of_item[i] = cell_index(c.x, c.y, c.z);
    ++starts_[static_cast<size_t>(cell_of_item[i]) + 1];
  }
  for (size_t i = 1; i < starts_.size(); ++i) starts_[i] += starts_[i - 1];
  ids_.resize(items_.size());
  std::vector<int32_t> cursor(starts_.begin(), starts_.end() - 1);
  for (size_t i = 0; i < items_.size(); ++i)
    ids_[static_cast<size_t>(cursor[static_cast<size_t>(cell_of_item[i])]++)] =
        static_cast<int32_t>(i);
}

GridIndex::Cell GridIndex::cell_of(const Vec3& p) const {
  return {static_cast<int32_t>(std::floor((p[0] - origin_[0]) / cell_size_)),
          static_cast<int32_t>(std::floor((p[1] - origin_[1]) / cell_size_)),
          static_cast<int32_t>(std::floor((p[2] - origin_[2]) / cell_size_))};
}

template <typename Pred>
std::vector<int> GridIndex::gather_box(const Vec3& lo, const Vec3& hi, Pred&& pred) const {
  std::vector<int> out;
  if (items_.empty()) return out;
  const Cell clo = cell_of(lo);
  const Cell chi = cell_of(hi);
  const int32_t x0 = std::max(clo.x, 0), x1 = std::min(chi.x, nx_ - 1);
  const int32_t y0 = std::max(clo.y, 0), y1 = std::min(chi.y, ny_ - 1);
  const int32_t z0 = std::max(clo.z, 0), z1 = std::min(chi.z, nz_ - 1);
  for (int32_t cx = x0; cx <= x1; ++cx)
    for (int32_t cy = y0; cy <= y1; ++cy) {
      const int64_t row = cell_index(cx, cy, z0);
      const int32_t lo_id = starts_[static_cast<size_t>(row)];
      const int32_t hi_id = starts_[static_cast<size_t>(row + (z1 - z0)) + 1];
      for (int32_t s = lo_id; s < hi_id; ++s) {
        const int id = ids_[static_cast<size_t>(s)];
        if (pred(items_[static_cast<size_t>(id)])) out.push_back(id);
      }
    }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> GridIndex::query_ellipsoid(const EllipsoidQuery& q) const {
  const double r = q.minor_radius;
  const double kr = q.major_scale * r;
  const int maj = static_cast<int>(q.major_axis);
  Vec3 half{r, r, r};
  half[maj] = kr;
  const double inv_r2 = 1.0 / (r * r);
  const double inv_kr2 = 1.0 / (kr * kr);
  return gather_box(q.center - half, q.center + half, [&](const Vec3& p) {
    double s = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double d = p[a] - q.center[a];
      s += d * d * (a == maj ? inv_kr2 : inv_r2);
    }
    return s < 1.0;
  });
}

std::vector<int> GridIndex::query_ball(const Vec3& center, double radius) const {
  const Vec3 half{radius, radius, radius};
  const double r2 = radius * radius;
  return gather_box(center - half, center + half,
                    [&](const Vec3& p) { return dist2(p, center) < r2; });
}

std::vector<int> GridIndex::knn(const Vec3& center, int k) const {
  if (items_.empty()) throw ValueError("knn on empty index");
  if (k < 1) throw ValueError("knn requires k >= 1");

  const Cell cc = cell_of(center);
  const int32_t ring_max = std::max({cc.x, nx_ - 1 - cc.x, cc.y, ny_ - 1 - cc.y, cc.z,
                                     nz_ - 1 - cc.z, 0});

  struct Cand {
    double d2;
    int id;
  };
  std::vector<Cand> cands;
  auto scan_cell = [&](int32_t cx, int32_t cy, int32_t cz) {
    if (cx < 0 || cx >= nx_ || cy < 0 || cy >= ny_ || cz < 0 || cz >= nz_) return;
    const int64_t cell = cell_index(cx, cy, cz);
    const int32_t lo = starts_[static_cast<size_t>(cell)];
    const int32_t hi = starts_[static_cast<size_t>(cell) + 1];
    for (int32_t s = lo; s < hi; ++s) {
      const int id = ids_[static_cast<size_t>(s)];
      cands.push_back({dist2(items_[static_cast<size_t>(id)], center), id});
    }
  };

  const auto by_dist_then_id = [](const Cand& a, const Cand& b) {
    return a.d2 != b.d2 ? a.d2 < b.d2 : a.id < b.id;
  };

  for (int32_t ring = 0; ring <= ring_max; ++ring) {
    if (ring == 0) {
      scan_cell(cc.x, cc.y, cc.z);
    } else {
      // faces of the cube at Chebyshev distance `ring` from cc
      for (int32_t dx = -ring; dx <= ring; ++dx)
        for (int32_t dy = -ring; dy <= ring; ++dy) {
          const bool edge = std::abs(dx) == ring || std::abs(dy) == ring;
          if (edge) {
            for (int32_t dz = -ring; dz <= ring; ++dz)
              scan_cell(cc.x + dx, cc.y + dy, cc.z + dz);
          } else {
            scan_cell(cc.x + dx, cc.y + dy, cc.z - ring);
            scan_cell(cc.x + dx, cc.y + dy, cc.z + ring);
          }
        }
    }
    if (static_cast<int>(cands.size()) >= k) {
      std::nth_element(cands.begin(), cands.begin() + (k - 1), cands.end(),
                       by_dist_then_id);
      const double kth = cands[static_cast<size_t>(k - 1)].d2;
      // Any point in a ring R >= ring+1 lies at least (R-1) cells away;
      // strict comparison keeps equal-distance smaller-id candidates fair.
      const double lower = static_cast<double>(ring) * cell_size_;
      if (kth < lower * lower) break;
    }
  }

  const int take = std::min<int>(k, static_cast<int>(cands.size()));
  std::partial_sort(cands.begin(), cands.begin() + take, cands.end(), by_dist_then_id);
  std::vector<int> out(static_cast<size_t>(take));
  for (int i = 0; i < take; ++i) out[static_cast<size_t>(i)] = cands[static_cast<size_t>(i)].id;
  return out;
}

GridIndex build_index(std::vector<Vec3> positions, double cell_size) {
  return GridIndex(std::move(positions), cell_size);
}

std::vector<int> farthest_point_sampling_from(std::span<const Vec3> positions, int count,
                                              int first) {
  const int n = static_cast<int>(positions.size());
  if (count > n)
    throw ValueError("farthest_point_sampling: requested " + std::to_string(count) +
                     " of " + std::to_string(n) + " points");
  std::vector<int> picked;
  if (count == 0) return picked;
  picked.reserve(static_cast<size_t>(count));
  picked.push_back(first);
  std::vector<double> best(static_cast<size_t>(n), std::numeric_limits<double>::infinity());
  for (int step = 1; step < count; ++step) {
    const Vec3& last = positions[static_cast<size_t>(picked.back())];
    int arg = -1;
    double far = -1.0;
    for (int i = 0; i < n; ++i) {
      const double d = dist2(positions[static_cast<size_t>(i)], last);
      if (d < best[static_cast<size_t>(i)]) best[static_cast<size_t>(i)] = d;
      if (best[static_cast<size_t>(i)] > far) {
        far = best[static_cast<size_t>(i)];
        arg = i;
      }
    }
    picked.push_back(arg);
  }
  return picked;
}

std::vector<int> farthest_point_sampling(std::span<const Vec3> positions, int count,
                                         uint64_t seed) {
  if (count == 0) return {};
  if (positions.empty())
    throw ValueError("farthest_point_sampling on empty position set");
  Rng rng(seed);
  const int first = static_cast<int>(rng.below(positions.size()));
  return farthest_point_sampling_from(positions, count, first);
}

std::vector<int> subsample_capped(std::span<const int> ids, int cap, uint64_t seed) {
  if (cap < 1) throw ValueError("subsample_capped requires cap >= 1");
  std::vector<int> out(ids.begin(), ids.end());
  if (static_cast<int>(out.size()) <= cap) return out;
  Rng rng(seed);
  for (int i = 0; i < cap; ++i) {
    const size_t j = static_cast<size_t>(i) + rng.below(out.size() - static_cast<size_t>(i));
    std::swap(out[static_cast<size_t>(i)], out[j]);
  }
  out.resize(static_cast<size_t>(cap));
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace pva
