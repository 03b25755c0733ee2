#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pva/error.hpp"
#include "pva/rng.hpp"
#include "pva/vec3.hpp"

namespace pva {

enum class Axis : int { X = 0, Y = 1, Z = 2 };

// Ellipsoidal receptive field: radius r on the two minor axes, k*r on the
// major one. Membership is strict:
//   (d_major)^2/(kr)^2 + (d_minor1)^2/r^2 + (d_minor2)^2/r^2 < 1
struct EllipsoidQuery {
  Vec3 center{0, 0, 0};
  double minor_radius = 0.03;
  double major_scale = 3.0;
  Axis major_axis = Axis::X;
};

// Uniform-bucket spatial index over a dense cell box in CSR layout. Query
// results are duplicate-free and returned in ascending id order; knn is
// ordered by distance with ties broken by ascending id.
class GridIndex {
 public:
  GridIndex(std::vector<Vec3> positions, double cell_size);

  int64_t size() const { return static_cast<int64_t>(items_.size()); }
  const Vec3& position(int id) const { return items_[static_cast<size_t>(id)]; }
  // Effective cell edge; grown from the requested size when the point
  // extent would need an unreasonable number of cells.
  double cell_size() const { return cell_size_; }
  const Vec3& origin() const { return origin_; }

  std::vector<int> query_ellipsoid(const EllipsoidQuery& q) const;
  std::vector<int> query_ball(const Vec3& center, double radius) const;
  std::vector<int> knn(const Vec3& center, int k) const;

 private:
  struct Cell {
    int32_t x, y, z;
  };
  Cell cell_of(const Vec3& p) const;
  int64_t cell_index(int32_t cx, int32_t cy, int32_t cz) const {
    return (static_cast<int64_t>(cx) * ny_ + cy) * nz_ + cz;
  }
  template <typename Pred>
  std::vector<int> gather_box(const Vec3& lo, const Vec3& hi, Pred&& pred) const;

  double cell_size_ = 0.0;
  Vec3 origin_{0, 0, 0};
  std::vector<Vec3> items_;
  int32_t nx_ = 0, ny_ = 0, nz_ = 0;
  std::vector<int32_t> starts_;  // CSR offsets, one per cell plus one
  std::vector<int32_t> ids_;     // point ids grouped by cell
};

GridIndex build_index(std::vector<Vec3> positions, double cell_size);

// Greedy max-min subset selection; the first pick is made by the seeded RNG.
std::vector<int> farthest_point_sampling(std::span<const Vec3> positions, int count,
                                         uint64_t seed);

// Same, with the first pick fixed by the caller.
std::vector<int> farthest_point_sampling_from(std::span<const Vec3> positions, int count,
                                              int first);

// Uniform sample without replacement when ids exceed cap; identity
// otherwise. Output ascending.
std::vector<int> subsample_capped(std::span<const int> ids, int cap, uint64_t seed);

}  // namespace pva
