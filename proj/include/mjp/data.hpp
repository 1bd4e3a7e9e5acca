#pragma once

// Synthetic multi-modal scenes (ray-cast LiDAR + rasterized grayscale camera)
// and the on-disk dataset layout scene_%05d/{points.bin,image.pgm,calib.json,boxes.json}.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mjp/bytes.hpp"
#include "mjp/geometry.hpp"
#include "mjp/point_cloud.hpp"
#include "mjp/rng.hpp"

namespace mjp {

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  GrayImage() = default;
  GrayImage(int w, int h, std::uint8_t fill = 0) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}

  std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }

  /// Border-replicating access.
  std::uint8_t clamped(int x, int y) const {
    return at(std::clamp(x, 0, width - 1), std::clamp(y, 0, height - 1));
  }

  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

// Binary PGM: "P5\n<w> <h>\n255\n" followed by w*h bytes.
inline std::vector<std::uint8_t> encode_pgm(const GrayImage& img) {
  const std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

inline GrayImage decode_pgm(std::span<const std::uint8_t> data, const std::string& path = "<memory>") {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < data.size()) {
      if (data[pos] == '#') {
        while (pos < data.size() && data[pos] != '\n') ++pos;
      } else if (std::isspace(data[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&](const char* what) {
    skip_space();
    const std::size_t start = pos;
    int value = 0;
    auto [ptr, ec] = std::from_chars(reinterpret_cast<const char*>(data.data()) + pos,
                                     reinterpret_cast<const char*>(data.data()) + data.size(), value);
    if (ec != std::errc() || value <= 0) throw FormatError(path, start, std::string("bad PGM ") + what);
    pos = static_cast<std::size_t>(ptr - reinterpret_cast<const char*>(data.data()));
    return value;
  };
  if (data.size() < 2 || data[0] != 'P' || data[1] != '5') throw FormatError(path, 0, "bad magic (expected P5)");
  pos = 2;
  const int w = read_int("width");
  const int h = read_int("height");
  const int maxval = read_int("maxval");
  if (maxval != 255) throw FormatError(path, pos, "only maxval 255 is supported");
  if (pos >= data.size() || !std::isspace(data[pos])) throw FormatError(path, pos, "missing header terminator");
  ++pos;
  const std::size_t n = static_cast<std::size_t>(w) * h;
  if (data.size() - pos != n) throw FormatError(path, pos, "pixel payload size mismatch");
  GrayImage img(w, h);
  std::copy(data.begin() + static_cast<std::ptrdiff_t>(pos), data.end(), img.pixels.begin());
  return img;
}

inline void write_image(const std::filesystem::path& path, const GrayImage& img) {
  bytes::write_file(path, encode_pgm(img));
}

inline GrayImage read_image(const std::filesystem::path& path) {
  return decode_pgm(bytes::read_file(path), path.string());
}

// ---------------------------------------------------------------------------

/// Ground-truth object: center and size in meters, yaw in radians about ego z.
struct Box {
  Vec3 center = Vec3::Zero();
  Vec3 size = Vec3::Ones();
  double yaw = 0.0;

  bool contains_xy(double x, double y) const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    const double dx = x - center.x(), dy = y - center.y();
    const double lx = c * dx + s * dy;
    const double ly = -s * dx + c * dy;
    return std::abs(lx) <= 0.5 * size.x() && std::abs(ly) <= 0.5 * size.y();
  }
};

inline nlohmann::json boxes_to_json(std::span<const Box> boxes) {
  auto arr = nlohmann::json::array();
  for (const auto& b : boxes) {
    arr.push_back({{"center", {b.center.x(), b.center.y(), b.center.z()}},
                   {"size", {b.size.x(), b.size.y(), b.size.z()}},
                   {"yaw", b.yaw}});
  }
  return arr;
}

inline std::vector<Box> boxes_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw std::invalid_argument("boxes: expected a JSON list");
  std::vector<Box> out;
  for (const auto& e : j) {
    Box b;
    const auto& c = e.at("center");
    const auto& s = e.at("size");
    if (c.size() != 3 || s.size() != 3) throw std::invalid_argument("boxes: center and size need 3 numbers");
    b.center = Vec3(c[0].get<double>(), c[1].get<double>(), c[2].get<double>());
    b.size = Vec3(s[0].get<double>(), s[1].get<double>(), s[2].get<double>());
    b.yaw = e.at("yaw").get<double>();
    if (!(b.size.minCoeff() > 0.0)) throw std::invalid_argument("boxes: sizes must be positive");
    out.push_back(b);
  }
  return out;
}

inline void write_boxes(const std::filesystem::path& path, std::span<const Box> boxes) {
  detail::write_json(path, boxes_to_json(boxes));
}

inline std::vector<Box> read_boxes(const std::filesystem::path& path) {
  try {
    return boxes_from_json(detail::read_json(path));
  } catch (const std::invalid_argument& e) {
    throw Error(ErrorKind::data, path.string() + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::data, path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

struct SceneConfig {
  int n_boxes_min = 2;
  int n_boxes_max = 6;
  std::array<double, 2> box_length{1.5, 4.5};
  std::array<double, 2> box_width{1.5, 2.2};
  std::array<double, 2> box_height{1.0, 1.8};
  double placement_extent = 11.0;  // |x|, |y| bound on box centers
  double ground_z = -1.6;
  double wall_probability = 0.3;

  int lidar_azimuth = 360;
  int lidar_elevation = 16;
  double elevation_min_deg = -25.0;
  double elevation_max_deg = 5.0;
  double max_range = 30.0;
  double noise_sigma = 0.02;

  int camera_width = 64;
  int camera_height = 64;
  double camera_fx = 40.0;
  double camera_fy = 40.0;
  std::array<double, 3> camera_position{0.0, 0.0, 0.0};

  void validate() const {
    if (n_boxes_min < 0 || n_boxes_max < n_boxes_min) throw std::invalid_argument("SceneConfig: bad box count range");
    for (const auto* r : {&box_length, &box_width, &box_height})
      if (!((*r)[0] > 0.0 && (*r)[1] >= (*r)[0])) throw std::invalid_argument("SceneConfig: bad box size range");
    if (lidar_azimuth < 1 || lidar_elevation < 1) throw std::invalid_argument("SceneConfig: LiDAR ray counts must be >= 1");
    if (!(noise_sigma >= 0.0)) throw std::invalid_argument("SceneConfig: noise sigma must be >= 0");
    if (!(max_range > 0.0)) throw std::invalid_argument("SceneConfig: max range must be positive");
    if (camera_width < 1 || camera_height < 1) throw std::invalid_argument("SceneConfig: camera dims must be >= 1");
    if (!(wall_probability >= 0.0 && wall_probability <= 1.0))
      throw std::invalid_argument("SceneConfig: wall probability outside [0,1]");
  }

  CameraModel camera() const {
    return CameraModel(camera_fx, camera_fy, camera_width / 2.0, camera_height / 2.0, camera_width, camera_height,
                       Pose(forward_camera_rotation(), Vec3(camera_position[0], camera_position[1], camera_position[2])));
  }
};

struct SceneFrame {
  std::vector<PointXYZI> points;
  GrayImage image;
  CameraModel cam;
  std::vector<Box> boxes;
  std::uint64_t seed = 0;
};

// Scene geometry ------------------------------------------------------------

enum class SurfaceKind : std::uint8_t { ground, box, wall };

struct SolidBox {
  Vec3 min = Vec3::Zero();
  Vec3 max = Vec3::Zero();
  SurfaceKind kind = SurfaceKind::box;
  double albedo = 0.5;  // LiDAR reflectivity
  double gray = 180.0;  // camera base gray level

  bool overlaps_xy(const SolidBox& o, double margin) const {
    return min.x() - margin < o.max.x() && o.min.x() - margin < max.x() && min.y() - margin < o.max.y() &&
           o.min.y() - margin < max.y();
  }
};

struct SceneLayout {
  double ground_z = 0.0;
  std::vector<SolidBox> solids;  // walls first, then boxes
  std::vector<Box> boxes;        // ground-truth objects (walls are background)
};

struct RayHit {
  double t = std::numeric_limits<double>::infinity();
  Vec3 normal = Vec3::Zero();
  int solid = -1;  // -1 ground, otherwise index into SceneLayout::solids
  bool hit() const { return std::isfinite(t); }
};

/// Slab test against an axis-aligned box; returns the entry distance and face normal.
inline std::optional<std::pair<double, Vec3>> intersect_aabb(const Vec3& origin, const Vec3& dir, const Vec3& lo,
                                                             const Vec3& hi) {
  double t_near = -std::numeric_limits<double>::infinity();
  double t_far = std::numeric_limits<double>::infinity();
  int axis = -1;
  double sign = 0.0;
  for (int a = 0; a < 3; ++a) {
    if (dir[a] == 0.0) {
      if (origin[a] < lo[a] || origin[a] > hi[a]) return std::nullopt;
      continue;
    }
    double t0 = (lo[a] - origin[a]) / dir[a];
    double t1 = (hi[a] - origin[a]) / dir[a];
    double s = -1.0;
    if (t0 > t1) {
      std::swap(t0, t1);
      s = 1.0;
    }
    if (t0 > t_near) {
      t_near = t0;
      axis = a;
      sign = s;
    }
    t_far = std::min(t_far, t1);
  }
  if (axis < 0 || t_near > t_far || t_near <= 0.0) return std::nullopt;
  Vec3 n = Vec3::Zero();
  n[axis] = sign;
  return std::make_pair(t_near, n);
}

inline RayHit cast_ray(const SceneLayout& layout, const Vec3& origin, const Vec3& dir) {
  RayHit best;
  if (dir.z() < 0.0 && origin.z() > layout.ground_z) {
    best.t = (layout.ground_z - origin.z()) / dir.z();
    best.normal = Vec3::UnitZ();
    best.solid = -1;
  }
  for (std::size_t i = 0; i < layout.solids.size(); ++i) {
    const auto& s = layout.solids[i];
    if (auto h = intersect_aabb(origin, dir, s.min, s.max); h && h->first < best.t) {
      best.t = h->first;
      best.normal = h->second;
      best.solid = static_cast<int>(i);
    }
  }
  return best;
}

namespace detail {
// Box coordinates are snapped to 1/64 m so that faces are exactly representable in f32.
inline double snap(double v) { return std::round(v * 64.0) / 64.0; }
}  // namespace detail

inline SceneLayout generate_layout(const SceneConfig& cfg, Rng& rng, std::uint64_t seed) {
  cfg.validate();
  constexpr int kMaxAttempts = 1000;
  constexpr double kMargin = 0.3;
  SceneLayout layout;
  layout.ground_z = cfg.ground_z;

  if (rng.uniform() < cfg.wall_probability) {
    const int side = rng.range(0, 2);  // 0 left, 1 right, 2 front
    const double length = detail::snap(rng.uniform(8.0, 16.0));
    const double along = detail::snap(rng.uniform(-12.8 + 0.5 * length, 12.8 - 0.5 * length));
    const double offset = detail::snap(rng.uniform(11.0, 11.6));
    constexpr double kThickness = 0.625;
    SolidBox wall;
    wall.kind = SurfaceKind::wall;
    wall.albedo = 0.35;
    wall.gray = 150.0;
    const double zlo = cfg.ground_z, zhi = cfg.ground_z + 4.0;
    if (side == 2) {
      wall.min = Vec3(offset, along - 0.5 * length, zlo);
      wall.max = Vec3(offset + kThickness, along + 0.5 * length, zhi);
    } else {
      const double y = side == 0 ? offset : -offset - kThickness;
      wall.min = Vec3(along - 0.5 * length, y, zlo);
      wall.max = Vec3(along + 0.5 * length, y + kThickness, zhi);
    }
    layout.solids.push_back(wall);
  }

  const int n_boxes = rng.range(cfg.n_boxes_min, cfg.n_boxes_max);
  for (int b = 0; b < n_boxes; ++b) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
      const double l = detail::snap(rng.uniform(cfg.box_length[0], cfg.box_length[1]));
      const double w = detail::snap(rng.uniform(cfg.box_width[0], cfg.box_width[1]));
      const double h = detail::snap(rng.uniform(cfg.box_height[0], cfg.box_height[1]));
      const double cx = detail::snap(rng.uniform(-cfg.placement_extent, cfg.placement_extent));
      const double cy = detail::snap(rng.uniform(-cfg.placement_extent, cfg.placement_extent));
      // Boxes alternate between lengthwise along x and along y.
      const bool along_x = rng.uniform() < 0.5;
      const double sx = along_x ? l : w, sy = along_x ? w : l;
      SolidBox s;
      s.kind = SurfaceKind::box;
      s.min = Vec3(cx - 0.5 * sx, cy - 0.5 * sy, cfg.ground_z);
      s.max = Vec3(cx + 0.5 * sx, cy + 0.5 * sy, detail::snap(cfg.ground_z + h));
      s.albedo = rng.uniform(0.5, 0.9);
      s.gray = rng.uniform(120.0, 250.0);
      // keep the sensor origin clear
      const bool near_ego = s.min.x() < 3.0 && s.max.x() > -3.0 && s.min.y() < 2.0 && s.max.y() > -2.0;
      bool clash = near_ego;
      for (const auto& o : layout.solids) clash = clash || s.overlaps_xy(o, kMargin);
      if (clash) continue;
      layout.solids.push_back(s);
      Box truth;
      truth.center = 0.5 * (s.min + s.max);
      truth.size = s.max - s.min;
      truth.yaw = 0.0;
      layout.boxes.push_back(truth);
      placed = true;
    }
    if (!placed)
      throw Error(ErrorKind::data, "generate_scene: could not place box " + std::to_string(b) + " after " +
                                       std::to_string(kMaxAttempts) + " attempts (seed " + std::to_string(seed) + ")");
  }
  return layout;
}

struct LidarHit {
  Vec3 point = Vec3::Zero();  // double precision, before f32 storage
  double intensity = 0.0;
  int solid = -1;             // -1 ground
  Vec3 direction = Vec3::Zero();
  double true_range = 0.0;    // noise-free range along `direction`
};

/// Spinning LiDAR at the ego origin: azimuth-major sweep, elevations evenly
/// spaced between the configured limits, Gaussian noise along the ray.
inline std::vector<LidarHit> cast_lidar(const SceneLayout& layout, const SceneConfig& cfg, Rng& rng) {
  std::vector<LidarHit> hits;
  const Vec3 origin = Vec3::Zero();
  for (int ia = 0; ia < cfg.lidar_azimuth; ++ia) {
    const double az = 2.0 * std::numbers::pi * ia / cfg.lidar_azimuth;
    for (int ie = 0; ie < cfg.lidar_elevation; ++ie) {
      const double el_deg = cfg.lidar_elevation == 1
                                ? cfg.elevation_min_deg
                                : cfg.elevation_min_deg +
                                      (cfg.elevation_max_deg - cfg.elevation_min_deg) * ie / (cfg.lidar_elevation - 1);
      const double el = el_deg * std::numbers::pi / 180.0;
      const Vec3 dir(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
      const RayHit h = cast_ray(layout, origin, dir);
      if (!h.hit() || h.t > cfg.max_range) continue;
      const double noise = cfg.noise_sigma > 0.0 ? cfg.noise_sigma * rng.normal() : 0.0;
      const double albedo = h.solid < 0 ? 0.15 : layout.solids[h.solid].albedo;
      LidarHit out;
      out.point = dir * (h.t + noise);
      out.intensity = std::clamp(albedo * (0.5 + 0.5 * std::abs(dir.dot(h.normal))), 0.0, 1.0);
      out.solid = h.solid;
      out.direction = dir;
      out.true_range = h.t;
      hits.push_back(out);
    }
  }
  return hits;
}

inline GrayImage render_camera(const SceneLayout& layout, const CameraModel& cam) {
  GrayImage img(cam.width(), cam.height());
  const Vec3 origin = cam.pose().translation();
  for (int y = 0; y < cam.height(); ++y) {
    for (int x = 0; x < cam.width(); ++x) {
      const Vec3 dir = pixel_ray(cam, x + 0.5, y + 0.5);
      const RayHit h = cast_ray(layout, origin, dir);
      double value = 200.0;  // sky
      if (h.hit() && h.t < 80.0) {
        const Vec3 p = origin + dir * h.t;
        const double fade = 1.0 / (1.0 + 0.02 * h.t);
        if (h.solid < 0) {
          const bool light = (static_cast<long>(std::floor(p.x() / 2.0)) + static_cast<long>(std::floor(p.y() / 2.0))) % 2 != 0;
          value = (light ? 95.0 : 70.0) * (0.6 + 0.4 * fade);
        } else {
          const auto& s = layout.solids[h.solid];
          const double face = h.normal.z() != 0.0 ? 1.0 : (h.normal.x() != 0.0 ? 0.85 : 0.7);
          double base = s.gray;
          if (s.kind == SurfaceKind::wall && static_cast<long>(std::floor(p.x() + p.y())) % 2 == 0) base -= 30.0;
          value = base * face * (0.5 + 0.5 * fade);
        }
      }
      img.at(x, y) = static_cast<std::uint8_t>(std::clamp(std::lround(value), 0L, 255L));
    }
  }
  return img;
}

inline SceneFrame generate_scene(const SceneConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  SceneLayout layout = generate_layout(cfg, rng, seed);
  const auto hits = cast_lidar(layout, cfg, rng);
  CameraModel cam = cfg.camera();
  SceneFrame frame{{}, render_camera(layout, cam), cam, layout.boxes, seed};
  frame.points.reserve(hits.size());
  for (const auto& h : hits)
    frame.points.push_back({static_cast<float>(h.point.x()), static_cast<float>(h.point.y()),
                            static_cast<float>(h.point.z()), static_cast<float>(h.intensity)});
  return frame;
}

// Dataset layout ----------------------------------------------------------------

inline std::string scene_dir_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%05zu", index);
  return buf;
}

inline void write_scene(const std::filesystem::path& dir, const SceneFrame& frame) {
  std::filesystem::create_directories(dir);
  write_pointcloud(dir / "points.bin", frame.points);
  write_image(dir / "image.pgm", frame.image);
  write_calib(dir / "calib.json", frame.cam);
  write_boxes(dir / "boxes.json", frame.boxes);
}

inline SceneFrame read_scene(const std::filesystem::path& dir) {
  CameraModel cam = read_calib(dir / "calib.json");
  GrayImage image = read_image(dir / "image.pgm");
  if (image.width != cam.width() || image.height != cam.height())
    throw Error(ErrorKind::data, (dir / "image.pgm").string() + ": image size does not match calibration");
  SceneFrame frame{read_pointcloud(dir / "points.bin"), std::move(image), cam, read_boxes(dir / "boxes.json"), 0};
  return frame;
}

/// Sorted scene_* directories under `root`.
inline std::vector<std::filesystem::path> list_scenes(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw PrerequisiteError("dataset directory not found: " + root.string());
  std::vector<std::filesystem::path> dirs;
  for (const auto& e : std::filesystem::directory_iterator(root))
    if (e.is_directory() && e.path().filename().string().rfind("scene_", 0) == 0) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw PrerequisiteError("no scene_* directories in " + root.string());
  return dirs;
}

}  // namespace mjp
