#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pva/rng.hpp"
#include "pva/vec3.hpp"
#include "pva/volume.hpp"

namespace pva {

// Semantic class ids, table-header order. 0 is the empty class.
namespace cls {
inline constexpr uint8_t kEmpty = 0;
inline constexpr uint8_t kCeil = 1;
inline constexpr uint8_t kFloor = 2;
inline constexpr uint8_t kWall = 3;
inline constexpr uint8_t kWin = 4;
inline constexpr uint8_t kChair = 5;
inline constexpr uint8_t kBed = 6;
inline constexpr uint8_t kSofa = 7;
inline constexpr uint8_t kTable = 8;
inline constexpr uint8_t kTvs = 9;
inline constexpr uint8_t kFurn = 10;
inline constexpr uint8_t kObjs = 11;
inline constexpr int kClassCount = 11;
}  // namespace cls

// Axis-aligned voxel box, half-open on every axis: [x0,x1) x [y0,y1) x [z0,z1).
struct BoxSpec {
  int x0 = 0, y0 = 0, z0 = 0;
  int x1 = 0, y1 = 0, z1 = 0;
  uint8_t label = cls::kObjs;

  int64_t volume() const {
    return static_cast<int64_t>(x1 - x0) * (y1 - y0) * (z1 - z0);
  }
  bool contains(const Vec3& p) const {
    return p[0] >= x0 && p[0] < x1 && p[1] >= y0 && p[1] < y1 && p[2] >= z0 && p[2] < z1;
  }
};

// Pinhole camera in continuous voxel coordinates.
struct CameraSpec {
  Vec3 position{1.5, 1.5, 1.5};
  Vec3 direction{1, 0, 1};
  double fov_deg = 75.0;
};

struct SceneSpec {
  GridDims dims{30, 18, 30};
  int shell_thickness = 1;
  std::vector<BoxSpec> furniture;
  std::vector<BoxSpec> openings;  // window/door rectangles carved into walls
  CameraSpec camera;

  void validate() const;
};

// Rasterizes the spec into a ground-truth label volume: floor, ceiling and
// wall shells, wall openings, then furniture boxes in order.
std::vector<uint8_t> generate_scene(const SceneSpec& spec);

// Randomized room template: shells, a few furniture pieces, sometimes a
// window, camera in a corner looking into the room. All 11 classes are
// reachable across seeds.
SceneSpec random_scene_spec(GridDims dims, uint64_t seed);

struct RaycastResult {
  std::vector<VoxelKind> kinds;
  std::vector<float> depth;  // per ray, voxel units; 0 when nothing was hit
  int image_w = 0, image_h = 0;
};

// Marches camera rays through the volume: traversed empty voxels before the
// first hit become VisibleEmpty, the hit voxel ObservedSurface, everything
// else stays Occluded.
RaycastResult raycast_visibility(std::span<const uint8_t> labels, GridDims dims,
                                 const CameraSpec& camera);

// Flipped TSDF: distance (voxel units) to the nearest observed-surface
// voxel, truncated at trunc_voxels and scaled to [-1, 1]; positive in
// visible empty space, negative in occluded space, zero on the surface.
std::vector<float> compute_flipped_tsdf(std::span<const VoxelKind> kinds, GridDims dims,
                                        double trunc_voxels = 3.0);

// Full record pipeline: rasterize, raycast, TSDF.
TsdfVolume build_record(const SceneSpec& spec);

TsdfVolume record_from_seed(GridDims dims, uint64_t seed);

// --- SSCB on-disk format -------------------------------------------------
// Little-endian: magic "SSCB", version u32 (=1), dims 3xu32, then
// f32 tsdf[W*H*D], u8 labels[...], u8 kinds[...].

void write_record(const std::filesystem::path& path, const TsdfVolume& v);
TsdfVolume read_record(const std::filesystem::path& path);

// Line-oriented dataset manifest: "<split> <relative-path>" per line, '#'
// comments allowed. Record paths are relative to the manifest's directory.
struct ManifestEntry {
  std::string split;
  std::string path;
};

struct Manifest {
  std::filesystem::path directory;
  std::vector<ManifestEntry> entries;

  std::vector<std::filesystem::path> records(const std::string& split) const;
};

Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path,
                    std::span<const ManifestEntry> entries);

}  // namespace pva
