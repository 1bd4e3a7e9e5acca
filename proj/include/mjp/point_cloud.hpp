#pragma once

// Headerless point cloud file: little-endian f32 records (x, y, z, intensity).

#include <filesystem>
#include <span>
#include <vector>

#include "mjp/bytes.hpp"

namespace mjp {

struct PointXYZI {
  float x = 0.0f;
  float y = 0.0f;
  float z = 0.0f;
  float intensity = 0.0f;

  friend bool operator==(const PointXYZI&, const PointXYZI&) = default;
};

inline constexpr std::size_t kPointRecordBytes = 16;

inline std::vector<std::uint8_t> encode_points(std::span<const PointXYZI> points) {
  std::vector<std::uint8_t> out;
  out.reserve(points.size() * kPointRecordBytes);
  for (const auto& p : points) {
    bytes::put_f32(out, p.x);
    bytes::put_f32(out, p.y);
    bytes::put_f32(out, p.z);
    bytes::put_f32(out, p.intensity);
  }
  return out;
}

inline std::vector<PointXYZI> decode_points(std::span<const std::uint8_t> data, const std::string& path = "<memory>") {
  if (data.size() % kPointRecordBytes != 0)
    throw FormatError(path, data.size() - data.size() % kPointRecordBytes,
                      "point file size is not a multiple of 16 bytes");
  bytes::Reader in(data, path);
  std::vector<PointXYZI> points(data.size() / kPointRecordBytes);
  for (auto& p : points) {
    p.x = in.f32("x");
    p.y = in.f32("y");
    p.z = in.f32("z");
    p.intensity = in.f32("intensity");
  }
  return points;
}

inline void write_pointcloud(const std::filesystem::path& path, std::span<const PointXYZI> points) {
  bytes::write_file(path, encode_points(points));
}

inline std::vector<PointXYZI> read_pointcloud(const std::filesystem::path& path) {
  return decode_points(bytes::read_file(path), path.string());
}

}  // namespace mjp
