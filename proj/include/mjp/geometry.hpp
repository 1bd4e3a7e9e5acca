#pragma once

// Rigid transforms and the pinhole camera.
//
// Frame conventions used throughout the library:
//   ego frame    : x forward, y left, z up (meters)
//   camera frame : z forward (depth), x right, y down
// A Pose maps sensor-frame coordinates into the ego frame: p_ego = R * p_sensor + t.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

#include "json.hpp"
#include "mjp/error.hpp"

namespace mjp {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kRigidTolerance = 1e-9;

class Pose {
 public:
  Pose() : rotation_(Mat3::Identity()), translation_(Vec3::Zero()) {}

  Pose(const Mat3& rotation, const Vec3& translation) : rotation_(rotation), translation_(translation) {
    const double ortho = (rotation_.transpose() * rotation_ - Mat3::Identity()).cwiseAbs().maxCoeff();
    if (!(ortho <= kRigidTolerance)) throw std::invalid_argument("Pose: rotation is not orthonormal");
    if (!(std::abs(rotation_.determinant() - 1.0) <= kRigidTolerance))
      throw std::invalid_argument("Pose: rotation determinant is not +1");
    if (!translation_.allFinite()) throw std::invalid_argument("Pose: non-finite translation");
  }

  static Pose identity() { return Pose(); }

  static Pose translation(const Vec3& t) { return Pose(Mat3::Identity(), t); }

  /// Rotation about ego z by `yaw` radians (counter-clockwise seen from above).
  static Pose yaw(double yaw, const Vec3& t = Vec3::Zero()) {
    return Pose(Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix(), t);
  }

  const Mat3& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }

  /// Row-major homogeneous 4x4.
  std::array<double, 16> to_matrix() const {
    std::array<double, 16> m{};
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) m[r * 4 + c] = rotation_(r, c);
      m[r * 4 + 3] = translation_(r);
    }
    m[15] = 1.0;
    return m;
  }

  static Pose from_matrix(const std::array<double, 16>& m) {
    if (m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0)
      throw std::invalid_argument("Pose: bottom row of 4x4 must be (0,0,0,1)");
    Mat3 r;
    Vec3 t;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) r(i, j) = m[i * 4 + j];
      t(i) = m[i * 4 + 3];
    }
    return Pose(r, t);
  }

 private:
  Mat3 rotation_;
  Vec3 translation_;
};

inline Vec3 transform_point(const Pose& pose, const Vec3& p) { return pose.rotation() * p + pose.translation(); }

inline Pose invert_pose(const Pose& pose) {
  const Mat3 rt = pose.rotation().transpose();
  return Pose(rt, -(rt * pose.translation()));
}

/// compose(a, b) applies b first, then a.
inline Pose compose(const Pose& a, const Pose& b) {
  return Pose(a.rotation() * b.rotation(), a.rotation() * b.translation() + a.translation());
}

/// Rotation taking camera axes (z forward, x right, y down) onto ego axes for a
/// camera looking along ego +x.
inline Mat3 forward_camera_rotation() {
  Mat3 r;
  r << 0, 0, 1,
      -1, 0, 0,
      0, -1, 0;
  return r;
}

struct Pixel {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;
};

class CameraModel {
 public:
  CameraModel(double fx, double fy, double cx, double cy, int width, int height, Pose cam_to_ego)
      : fx_(fx), fy_(fy), cx_(cx), cy_(cy), width_(width), height_(height), pose_(std::move(cam_to_ego)),
        ego_to_cam_(invert_pose(pose_)) {
    if (!(fx > 0.0 && fy > 0.0)) throw std::invalid_argument("CameraModel: focal lengths must be positive");
    if (width <= 0 || height <= 0) throw std::invalid_argument("CameraModel: image size must be positive");
    if (!(cx > 0.0 && cx < width && cy > 0.0 && cy < height))
      throw std::invalid_argument("CameraModel: principal point outside the image");
  }

  double fx() const { return fx_; }
  double fy() const { return fy_; }
  double cx() const { return cx_; }
  double cy() const { return cy_; }
  int width() const { return width_; }
  int height() const { return height_; }
  const Pose& pose() const { return pose_; }
  const Pose& ego_to_camera() const { return ego_to_cam_; }

  friend bool operator==(const CameraModel& a, const CameraModel& b) {
    return a.fx_ == b.fx_ && a.fy_ == b.fy_ && a.cx_ == b.cx_ && a.cy_ == b.cy_ && a.width_ == b.width_ &&
           a.height_ == b.height_ && a.pose_.to_matrix() == b.pose_.to_matrix();
  }

 private:
  double fx_, fy_, cx_, cy_;
  int width_, height_;
  Pose pose_;
  Pose ego_to_cam_;
};

/// Pixel coordinates and depth of an ego-frame point, or nullopt when the point
/// is behind the camera or lands outside [0,width) x [0,height).
inline std::optional<Pixel> project(const CameraModel& cam, const Vec3& p_ego) {
  const Vec3 pc = transform_point(cam.ego_to_camera(), p_ego);
  if (!(pc.z() > 0.0)) return std::nullopt;
  const double u = cam.fx() * pc.x() / pc.z() + cam.cx();
  const double v = cam.fy() * pc.y() / pc.z() + cam.cy();
  if (!(u >= 0.0 && u < cam.width() && v >= 0.0 && v < cam.height())) return std::nullopt;
  return Pixel{u, v, pc.z()};
}

inline Vec3 unproject(const CameraModel& cam, double u, double v, double depth) {
  if (!(depth > 0.0)) throw std::invalid_argument("unproject: depth must be positive");
  const Vec3 pc((u - cam.cx()) / cam.fx() * depth, (v - cam.cy()) / cam.fy() * depth, depth);
  return transform_point(cam.pose(), pc);
}

/// Unit ray direction (ego frame) through pixel (u, v).
inline Vec3 pixel_ray(const CameraModel& cam, double u, double v) {
  const Vec3 dc((u - cam.cx()) / cam.fx(), (v - cam.cy()) / cam.fy(), 1.0);
  return (cam.pose().rotation() * dc).normalized();
}

// ---------------------------------------------------------------------------
// Calibration file: {"fx","fy","cx","cy","width","height","T_cam_to_ego":[16]}

inline nlohmann::json calib_to_json(const CameraModel& cam) {
  nlohmann::json j;
  j["fx"] = cam.fx();
  j["fy"] = cam.fy();
  j["cx"] = cam.cx();
  j["cy"] = cam.cy();
  j["width"] = cam.width();
  j["height"] = cam.height();
  const auto m = cam.pose().to_matrix();
  j["T_cam_to_ego"] = std::vector<double>(m.begin(), m.end());
  return j;
}

inline CameraModel calib_from_json(const nlohmann::json& j) {
  for (const char* key : {"fx", "fy", "cx", "cy", "width", "height", "T_cam_to_ego"})
    if (!j.contains(key)) throw std::invalid_argument(std::string("calib: missing key '") + key + "'");
  const auto& tm = j.at("T_cam_to_ego");
  if (!tm.is_array() || tm.size() != 16) throw std::invalid_argument("calib: T_cam_to_ego must hold 16 numbers");
  std::array<double, 16> m{};
  for (std::size_t i = 0; i < 16; ++i) m[i] = tm[i].get<double>();
  return CameraModel(j.at("fx").get<double>(), j.at("fy").get<double>(), j.at("cx").get<double>(),
                     j.at("cy").get<double>(), j.at("width").get<int>(), j.at("height").get<int>(),
                     Pose::from_matrix(m));
}

namespace detail {

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::data, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::data, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorKind::data, "write failed: " + path.string());
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string(), e.byte, "invalid JSON");
  }
}

/// Two-space indented, sorted keys, trailing newline.
inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  write_text(path, j.dump(2) + "\n");
}

}  // namespace detail

inline void write_calib(const std::filesystem::path& path, const CameraModel& cam) {
  detail::write_json(path, calib_to_json(cam));
}

inline CameraModel read_calib(const std::filesystem::path& path) {
  try {
    return calib_from_json(detail::read_json(path));
  } catch (const std::invalid_argument& e) {
    throw Error(ErrorKind::data, path.string() + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::data, path.string() + ": " + e.what());
  }
}

}  // namespace mjp
