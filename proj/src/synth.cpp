#include "pva/synth.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace pva {

static_assert(std::endian::native == std::endian::little,
              "SSCB I/O assumes a little-endian host");

void SceneSpec::validate() const {
  if (dims.w < 4 || dims.h < 4 || dims.d < 4)
    throw ValueError("scene dims too small for a shelled room");
  if (shell_thickness < 1) throw ValueError("shell_thickness must be >= 1");
  const int t = shell_thickness;
  for (const BoxSpec& b : furniture) {
    if (b.x0 < t || b.y0 < t || b.z0 < t || b.x1 > dims.w - t || b.y1 > dims.h - t ||
        b.z1 > dims.d - t || b.x0 >= b.x1 || b.y0 >= b.y1 || b.z0 >= b.z1)
      throw ValueError("furniture box outside the room interior");
    if (b.contains(camera.position)) throw ValueError("camera inside a furniture box");
  }
  const Vec3& c = camera.position;
  if (c[0] < t || c[0] >= dims.w - t || c[1] < t || c[1] >= dims.h - t || c[2] < t ||
      c[2] >= dims.d - t)
    throw ValueError("camera outside the room interior");
}

std::vector<uint8_t> generate_scene(const SceneSpec& spec) {
  spec.validate();
  const GridDims dims = spec.dims;
  std::vector<uint8_t> labels(static_cast<size_t>(dims.count()), cls::kEmpty);
  const int t = spec.shell_thickness;

  auto paint = [&](const BoxSpec& b) {
    for (int x = std::max(0, b.x0); x < std::min(dims.w, b.x1); ++x)
      for (int y = std::max(0, b.y0); y < std::min(dims.h, b.y1); ++y)
        for (int z = std::max(0, b.z0); z < std::min(dims.d, b.z1); ++z)
          labels[static_cast<size_t>(dims.index(x, y, z))] = b.label;
  };

  // Shell: floor and ceiling slabs, four walls.
  paint({0, 0, 0, dims.w, t, dims.d, cls::kFloor});
  paint({0, dims.h - t, 0, dims.w, dims.h, dims.d, cls::kCeil});
  paint({0, t, 0, t, dims.h - t, dims.d, cls::kWall});
  paint({dims.w - t, t, 0, dims.w, dims.h - t, dims.d, cls::kWall});
  paint({0, t, 0, dims.w, dims.h - t, t, cls::kWall});
  paint({0, t, dims.d - t, dims.w, dims.h - t, dims.d, cls::kWall});

  for (const BoxSpec& b : spec.openings) paint(b);
  for (const BoxSpec& b : spec.furniture) paint(b);
  return labels;
}

namespace {

// Picks a box footprint that avoids the camera position; gives up after a
// few tries and returns an empty box.
BoxSpec place_box(Rng& rng, const GridDims& dims, int t, int sx, int sy, int sz,
                  uint8_t label, const Vec3& cam, int y_base) {
  for (int attempt = 0; attempt < 24; ++attempt) {
    const int max_x = dims.w - t - sx;
    const int max_z = dims.d - t - sz;
    if (max_x < t || max_z < t) break;
    BoxSpec b;
    b.x0 = rng.uniform_int(t, max_x);
    b.z0 = rng.uniform_int(t, max_z);
    b.y0 = y_base;
    b.x1 = b.x0 + sx;
    b.y1 = std::min(b.y0 + sy, dims.h - t);
    b.z1 = b.z0 + sz;
    b.label = label;
    if (b.y0 >= b.y1) break;
    if (!b.contains(cam)) return b;
  }
  return {};
}

}  // namespace

SceneSpec random_scene_spec(GridDims dims, uint64_t seed) {
  Rng rng(Rng::mix(seed, 0x5ce9e5));
  SceneSpec spec;
  spec.dims = dims;
  spec.shell_thickness = 1;
  const int t = 1;

  // Camera in one of the four corners, raised, looking toward the middle.
  const bool cx = rng.below(2) != 0;
  const bool cz = rng.below(2) != 0;
  const double inset = 1.2 + rng.uniform() * 0.8;
  Vec3 cam;
  cam[0] = cx ? dims.w - t - inset : t + inset;
  cam[2] = cz ? dims.d - t - inset : t + inset;
  cam[1] = dims.h * (0.55 + rng.uniform() * 0.2);
  const Vec3 mid{dims.w * 0.5, dims.h * 0.35, dims.d * 0.5};
  spec.camera.position = cam;
  spec.camera.direction = normalized(mid - cam);
  spec.camera.fov_deg = 70.0 + rng.uniform() * 15.0;

  // Size helper proportional to the room footprint.
  auto span_of = [&](double lo_frac, double hi_frac, int lo_min) {
    const int base = std::min(dims.w, dims.d);
    const int lo = std::max(lo_min, static_cast<int>(base * lo_frac));
    const int hi = std::max(lo + 1, static_cast<int>(base * hi_frac));
    return rng.uniform_int(lo, hi);
  };
  const int hmax = dims.h - 2 * t;

  std::vector<uint8_t> kinds_pool = {cls::kBed,  cls::kSofa, cls::kTable, cls::kChair,
                                     cls::kFurn, cls::kObjs, cls::kTvs};
  rng.shuffle(kinds_pool);
  const int pieces = rng.uniform_int(3, 5);
  for (int i = 0; i < pieces; ++i) {
    const uint8_t label = kinds_pool[static_cast<size_t>(i) % kinds_pool.size()];
    BoxSpec b;
    switch (label) {
      case cls::kBed:
        b = place_box(rng, dims, t, span_of(0.2, 0.33, 4), std::min(hmax, rng.uniform_int(2, 3)),
                      span_of(0.25, 0.4, 5), label, cam, t);
        break;
      case cls::kSofa:
        b = place_box(rng, dims, t, span_of(0.15, 0.28, 4), std::min(hmax, rng.uniform_int(2, 4)),
                      span_of(0.08, 0.15, 2), label, cam, t);
        break;
      case cls::kTable:
        b = place_box(rng, dims, t, span_of(0.12, 0.25, 3), std::min(hmax, rng.uniform_int(2, 3)),
                      span_of(0.12, 0.25, 3), label, cam, t);
        break;
      case cls::kChair:
        b = place_box(rng, dims, t, span_of(0.06, 0.12, 2), std::min(hmax, rng.uniform_int(2, 4)),
                      span_of(0.06, 0.12, 2), label, cam, t);
        break;
      case cls::kFurn:
        b = place_box(rng, dims, t, span_of(0.08, 0.18, 2),
                      std::min(hmax, rng.uniform_int(dims.h / 3, 2 * dims.h / 3)),
                      span_of(0.08, 0.18, 2), label, cam, t);
        break;
      case cls::kTvs: {
        const int y0 = rng.uniform_int(t + 2, std::max(t + 3, dims.h / 2));
        b = place_box(rng, dims, t, span_of(0.08, 0.15, 2), 2, 1, label, cam, y0);
        break;
      }
      default: {  // objs: small clutter, sometimes raised
        const int y0 = rng.uniform_int(t, std::max(t + 1, dims.h / 3));
        b = place_box(rng, dims, t, span_of(0.04, 0.1, 1), rng.uniform_int(1, 2),
                      span_of(0.04, 0.1, 1), label, cam, y0);
        break;
      }
    }
    if (b.volume() > 0) spec.furniture.push_back(b);
  }

  // Window rectangle replacing wall voxels on one of the far walls.
  if (rng.below(10) < 7) {
    const int wy0 = dims.h / 2;
    const int wy1 = std::min(dims.h - t, wy0 + std::max(2, dims.h / 4));
    const bool on_x_wall = rng.below(2) != 0;
    if (on_x_wall) {
      const int wall_x = cx ? 0 : dims.w - t;  // opposite the camera corner
      const int len = span_of(0.15, 0.3, 3);
      const int z0 = rng.uniform_int(t + 1, std::max(t + 2, dims.d - t - len - 1));
      spec.openings.push_back({wall_x, wy0, z0, wall_x + t, wy1, z0 + len, cls::kWin});
    } else {
      const int wall_z = cz ? 0 : dims.d - t;
      const int len = span_of(0.15, 0.3, 3);
      const int x0 = rng.uniform_int(t + 1, std::max(t + 2, dims.w - t - len - 1));
      spec.openings.push_back({x0, wy0, wall_z, x0 + len, wy1, wall_z + t, cls::kWin});
    }
  }
  return spec;
}

RaycastResult raycast_visibility(std::span<const uint8_t> labels, GridDims dims,
                                 const CameraSpec& camera) {
  if (static_cast<int64_t>(labels.size()) != dims.count())
    throw DimensionError("raycast_visibility: label count does not match dims");
  RaycastResult res;
  res.kinds.assign(labels.size(), VoxelKind::Occluded);
  // Two rays per voxel of image-plane extent.
  res.image_w = 2 * std::max(dims.w, dims.d);
  res.image_h = 2 * dims.h;
  res.depth.assign(static_cast<size_t>(res.image_w) * res.image_h, 0.0f);

  const Vec3 fwd = normalized(camera.direction);
  Vec3 up{0, 1, 0};
  if (std::abs(dot(fwd, up)) > 0.999) up = {1, 0, 0};
  const Vec3 right = normalized(cross(fwd, up));
  const Vec3 cam_up = cross(right, fwd);
  const double tan_x = std::tan(camera.fov_deg * 0.5 * M_PI / 180.0);
  const double tan_y = tan_x * static_cast<double>(res.image_h) / res.image_w;

  for (int py = 0; py < res.image_h; ++py) {
    for (int px = 0; px < res.image_w; ++px) {
      const double u = (2.0 * (px + 0.5) / res.image_w - 1.0) * tan_x;
      const double v = (2.0 * (py + 0.5) / res.image_h - 1.0) * tan_y;
      const Vec3 dir = normalized(fwd + right * u + cam_up * v);

      // Amanatides-Woo voxel march from the camera voxel.
      int ix = static_cast<int>(std::floor(camera.position[0]));
      int iy = static_cast<int>(std::floor(camera.position[1]));
      int iz = static_cast<int>(std::floor(camera.position[2]));
      int step[3], cell[3] = {ix, iy, iz};
      double t_max[3], t_delta[3];
      for (int a = 0; a < 3; ++a) {
        if (dir[a] > 0) {
          step[a] = 1;
          t_delta[a] = 1.0 / dir[a];
          t_max[a] = (std::floor(camera.position[a]) + 1.0 - camera.position[a]) / dir[a];
        } else if (dir[a] < 0) {
          step[a] = -1;
          t_delta[a] = -1.0 / dir[a];
          t_max[a] = (camera.position[a] - std::floor(camera.position[a])) / -dir[a];
        } else {
          step[a] = 0;
          t_delta[a] = std::numeric_limits<double>::infinity();
          t_max[a] = std::numeric_limits<double>::infinity();
        }
      }
      double t_enter = 0.0;
      while (cell[0] >= 0 && cell[0] < dims.w && cell[1] >= 0 && cell[1] < dims.h &&
             cell[2] >= 0 && cell[2] < dims.d) {
        const size_t idx = static_cast<size_t>(dims.index(cell[0], cell[1], cell[2]));
        if (labels[idx] != cls::kEmpty) {
          res.kinds[idx] = VoxelKind::ObservedSurface;
          res.depth[static_cast<size_t>(py) * res.image_w + px] =
              static_cast<float>(t_enter);
          break;
        }
        res.kinds[idx] = VoxelKind::VisibleEmpty;
        const int axis = t_max[0] <= t_max[1] ? (t_max[0] <= t_max[2] ? 0 : 2)
                                              : (t_max[1] <= t_max[2] ? 1 : 2);
        t_enter = t_max[axis];
        t_max[axis] += t_delta[axis];
        cell[axis] += step[axis];
      }
    }
  }
  return res;
}

std::vector<float> compute_flipped_tsdf(std::span<const VoxelKind> kinds, GridDims dims,
                                        double trunc_voxels) {
  if (static_cast<int64_t>(kinds.size()) != dims.count())
    throw DimensionError("compute_flipped_tsdf: kind count does not match dims");
  if (trunc_voxels < 1.0) throw ValueError("truncation must be >= 1 voxel");
  std::vector<float> tsdf(kinds.size(), 0.0f);
  const int win = static_cast<int>(std::ceil(trunc_voxels));
  const double trunc2 = trunc_voxels * trunc_voxels;

  for (int x = 0; x < dims.w; ++x)
    for (int y = 0; y < dims.h; ++y)
      for (int z = 0; z < dims.d; ++z) {
        const size_t idx = static_cast<size_t>(dims.index(x, y, z));
        if (kinds[idx] == VoxelKind::ObservedSurface) continue;  // stays 0
        // Any surface farther than trunc_voxels in Chebyshev distance is
        // farther in Euclidean distance too, so the window search is exact.
        double best2 = trunc2;
        for (int dx = std::max(0, x - win); dx <= std::min(dims.w - 1, x + win); ++dx)
          for (int dy = std::max(0, y - win); dy <= std::min(dims.h - 1, y + win); ++dy)
            for (int dz = std::max(0, z - win); dz <= std::min(dims.d - 1, z + win); ++dz) {
              if (kinds[static_cast<size_t>(dims.index(dx, dy, dz))] !=
                  VoxelKind::ObservedSurface)
                continue;
              const double d2 = static_cast<double>(dx - x) * (dx - x) +
                                static_cast<double>(dy - y) * (dy - y) +
                                static_cast<double>(dz - z) * (dz - z);
              best2 = std::min(best2, d2);
            }
        const double mag = std::min(std::sqrt(best2), trunc_voxels) / trunc_voxels;
        tsdf[idx] = static_cast<float>(kinds[idx] == VoxelKind::VisibleEmpty ? mag : -mag);
      }
  return tsdf;
}

TsdfVolume build_record(const SceneSpec& spec) {
  TsdfVolume v;
  v.dims = spec.dims;
  v.label = generate_scene(spec);
  RaycastResult rc = raycast_visibility(v.label, v.dims, spec.camera);
  v.kind = std::move(rc.kinds);
  v.tsdf = compute_flipped_tsdf(v.kind, v.dims);
  return v;
}

TsdfVolume record_from_seed(GridDims dims, uint64_t seed) {
  return build_record(random_scene_spec(dims, seed));
}

namespace {

constexpr char kMagic[4] = {'S', 'S', 'C', 'B'};
constexpr uint32_t kVersion = 1;

void write_bytes(std::ofstream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_bytes(std::ifstream& is, void* p, size_t n, const char* what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(is.gcount()) != n)
    throw FormatError(std::string("truncated SSCB record while reading ") + what);
}

}  // namespace

void write_record(const std::filesystem::path& path, const TsdfVolume& v) {
  v.validate();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_bytes(os, kMagic, 4);
  write_bytes(os, &kVersion, 4);
  const uint32_t d[3] = {static_cast<uint32_t>(v.dims.w), static_cast<uint32_t>(v.dims.h),
                         static_cast<uint32_t>(v.dims.d)};
  write_bytes(os, d, 12);
  write_bytes(os, v.tsdf.data(), v.tsdf.size() * 4);
  write_bytes(os, v.label.data(), v.label.size());
  write_bytes(os, v.kind.data(), v.kind.size());
  if (!os) throw FormatError("failed writing " + path.string());
}

TsdfVolume read_record(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  char magic[4];
  read_bytes(is, magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("bad magic in " + path.string() + ": not an SSCB record");
  uint32_t version = 0;
  read_bytes(is, &version, 4, "version");
  if (version != kVersion)
    throw FormatError("unsupported SSCB version " + std::to_string(version) + " in " +
                      path.string());
  uint32_t d[3];
  read_bytes(is, d, 12, "dims");
  TsdfVolume v;
  v.dims = {static_cast<int>(d[0]), static_cast<int>(d[1]), static_cast<int>(d[2])};
  if (v.dims.count() <= 0 || v.dims.count() > (int64_t(1) << 28))
    throw FormatError("implausible dims in " + path.string());
  const size_t n = static_cast<size_t>(v.dims.count());
  v.tsdf.resize(n);
  v.label.resize(n);
  v.kind.resize(n);
  read_bytes(is, v.tsdf.data(), n * 4, "tsdf");
  read_bytes(is, v.label.data(), n, "labels");
  read_bytes(is, v.kind.data(), n, "kinds");
  v.validate();
  return v;
}

std::vector<std::filesystem::path> Manifest::records(const std::string& split) const {
  std::vector<std::filesystem::path> out;
  for (const ManifestEntry& e : entries)
    if (e.split == split) out.push_back(directory / e.path);
  return out;
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open manifest " + path.string());
  Manifest m;
  m.directory = path.parent_path();
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    ManifestEntry e;
    if (!(ls >> e.split >> e.path))
      throw FormatError("malformed manifest line " + std::to_string(lineno) + " in " +
                        path.string());
    m.entries.push_back(std::move(e));
  }
  return m;
}

void write_manifest(const std::filesystem::path& path,
                    std::span<const ManifestEntry> entries) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw FormatError("cannot open manifest " + path.string() + " for writing");
  for (const ManifestEntry& e : entries) os << e.split << ' ' << e.path << '\n';
  if (!os) throw FormatError("failed writing manifest " + path.string());
}

}  // namespace pva
