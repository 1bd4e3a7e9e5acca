#pragma once

// Toy sparse backbones and the BEV encoder.
//
// LiDAR: per BEV column (mask x-y cell), statistics over the points in its
// visited blocks. Camera: each kept patch gets a descriptor (mean luminance,
// RMS Sobel magnitude) that is splatted with weight 1/D into the column of
// every footprint voxel whose block is retained. Pruned blocks are never
// visited, so they cost nothing and contribute exact zeros.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "mjp/bytes.hpp"
#include "mjp/data.hpp"
#include "mjp/projection.hpp"
#include "mjp/voxelgrid.hpp"

namespace mjp {

namespace channel {
inline constexpr int log_count = 0;
inline constexpr int mean_z = 1;
inline constexpr int max_z = 2;
inline constexpr int var_z = 3;
inline constexpr int mean_intensity = 4;
inline constexpr int cam_luminance = 5;
inline constexpr int cam_gradient = 6;
inline constexpr int cam_hits = 7;

inline constexpr int lidar_count = 5;
inline constexpr int camera_count = 3;
inline constexpr int total = lidar_count + camera_count;
}  // namespace channel

/// Dense W x H x C map, value (x, y, c) at ((y * W + x) * C + c).
class BevFeatureMap {
 public:
  BevFeatureMap() = default;
  BevFeatureMap(int width, int height, int channels)
      : width_(width), height_(height), channels_(channels),
        values_(static_cast<std::size_t>(width) * height * channels, 0.0) {}

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }
  std::size_t columns() const { return static_cast<std::size_t>(width_) * height_; }
  std::size_t size() const { return values_.size(); }

  double& at(int x, int y, int c) { return values_[index(x, y, c)]; }
  double at(int x, int y, int c) const { return values_[index(x, y, c)]; }
  double& at(std::size_t column, int c) { return values_[column * channels_ + c]; }
  double at(std::size_t column, int c) const { return values_[column * channels_ + c]; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  bool same_shape(const BevFeatureMap& o) const {
    return width_ == o.width_ && height_ == o.height_ && channels_ == o.channels_;
  }

  friend bool operator==(const BevFeatureMap&, const BevFeatureMap&) = default;

 private:
  std::size_t index(int x, int y, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int width_ = 0, height_ = 0, channels_ = 0;
  std::vector<double> values_;
};

/// Exact tallies of backbone work, incremented by the extractors.
struct OpCounter {
  std::uint64_t lidar_blocks = 0;  // retained blocks visited by the LiDAR backbone
  std::uint64_t patch_bins = 0;    // kept patches x depth bins lifted by the camera backbone

  OpCounter& operator+=(const OpCounter& o) {
    lidar_blocks += o.lidar_blocks;
    patch_bins += o.patch_bins;
    return *this;
  }
};

namespace detail {

inline std::size_t column_of_block(const Dims3& mask_dims, std::size_t block) { return block / mask_dims.z; }

}  // namespace detail

/// LiDAR channels. `kept` selects points (all when nullopt); `mask` selects the
/// blocks the backbone visits (all when null).
inline BevFeatureMap extract_lidar_bev(const VoxelGridSpec& spec, const BlockMap& bm, std::span<const PointXYZI> points,
                                       std::optional<std::span<const std::uint32_t>> kept = std::nullopt,
                                       const MaskGrid* mask = nullptr, OpCounter* counter = nullptr) {
  if (!(bm.voxel_dims() == spec.dims())) throw DimensionError("extract_lidar_bev: block map does not match grid");
  if (mask) require_compatible(*mask, bm);
  const Dims3& md = bm.mask_dims();

  // (block, point) pairs sorted by block, then input order
  std::vector<std::pair<std::uint32_t, std::uint32_t>> keyed;
  auto add = [&](std::uint32_t i) {
    if (i >= points.size()) throw std::out_of_range("extract_lidar_bev: point index out of range");
    if (auto idx = voxel_index(spec, points[i])) keyed.emplace_back(static_cast<std::uint32_t>(block_of(bm, *idx)), i);
  };
  if (kept) {
    keyed.reserve(kept->size());
    for (auto i : *kept) add(i);
  } else {
    keyed.reserve(points.size());
    for (std::uint32_t i = 0; i < points.size(); ++i) add(i);
  }
  std::stable_sort(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

  BevFeatureMap out(md.x, md.y, channel::lidar_count);
  std::vector<double> zs;
  std::vector<double> intensities;
  std::size_t cursor = 0;
  const std::size_t n_columns = static_cast<std::size_t>(md.x) * md.y;
  for (std::size_t col = 0; col < n_columns; ++col) {
    zs.clear();
    intensities.clear();
    for (int iz = 0; iz < md.z; ++iz) {
      const std::size_t block = col * md.z + iz;
      const bool active = !mask || mask->kept(block);
      if (active && counter) ++counter->lidar_blocks;
      for (; cursor < keyed.size() && keyed[cursor].first == block; ++cursor) {
        if (!active) continue;
        const auto& p = points[keyed[cursor].second];
        zs.push_back(p.z);
        intensities.push_back(p.intensity);
      }
    }
    if (zs.empty()) continue;
    const double n = static_cast<double>(zs.size());
    double sum_z = 0.0, max_z = -std::numeric_limits<double>::infinity(), sum_i = 0.0;
    for (std::size_t k = 0; k < zs.size(); ++k) {
      sum_z += zs[k];
      max_z = std::max(max_z, zs[k]);
      sum_i += intensities[k];
    }
    const double mean_z = sum_z / n;
    double ss = 0.0;
    for (double z : zs) ss += (z - mean_z) * (z - mean_z);
    out.at(col, channel::log_count) = std::log1p(n);
    out.at(col, channel::mean_z) = mean_z;
    out.at(col, channel::max_z) = max_z;
    out.at(col, channel::var_z) = ss / n;
    out.at(col, channel::mean_intensity) = sum_i / n;
  }
  return out;
}

struct PatchDescriptor {
  double luminance = 0.0;  // mean gray / 255
  double gradient = 0.0;   // RMS Sobel magnitude / (1020 * sqrt 2), in [0, 1]
};

inline PatchDescriptor describe_patch(const GrayImage& img, const PatchGrid& pg, int id) {
  const int ps = pg.patch_size();
  const int x0 = pg.col(id) * ps, y0 = pg.row(id) * ps;
  double sum = 0.0, energy = 0.0;
  for (int y = y0; y < y0 + ps; ++y) {
    for (int x = x0; x < x0 + ps; ++x) {
      sum += img.at(x, y);
      const double gx = (img.clamped(x + 1, y - 1) + 2.0 * img.clamped(x + 1, y) + img.clamped(x + 1, y + 1)) -
                        (img.clamped(x - 1, y - 1) + 2.0 * img.clamped(x - 1, y) + img.clamped(x - 1, y + 1));
      const double gy = (img.clamped(x - 1, y + 1) + 2.0 * img.clamped(x, y + 1) + img.clamped(x + 1, y + 1)) -
                        (img.clamped(x - 1, y - 1) + 2.0 * img.clamped(x, y - 1) + img.clamped(x + 1, y - 1));
      energy += gx * gx + gy * gy;
    }
  }
  const double n = static_cast<double>(ps) * ps;
  return {sum / n / 255.0, std::sqrt(energy / n) / (1020.0 * std::numbers::sqrt2)};
}

inline std::vector<PatchDescriptor> describe_patches(const GrayImage& img, const PatchGrid& pg) {
  std::vector<PatchDescriptor> out(pg.count());
  for (int id = 0; id < pg.count(); ++id) out[id] = describe_patch(img, pg, id);
  return out;
}

/// Camera channels. `kept_patches` selects patches (all when nullopt); `mask`
/// selects which footprint voxels receive splats (all when null).
inline BevFeatureMap extract_camera_bev(const CameraModel& cam, const PatchGrid& pg, const FrustumFootprint& fp,
                                        const BlockMap& bm, const GrayImage& image,
                                        std::optional<std::span<const std::uint32_t>> kept_patches = std::nullopt,
                                        const MaskGrid* mask = nullptr, OpCounter* counter = nullptr) {
  if (image.width != cam.width() || image.height != cam.height())
    throw DimensionError("extract_camera_bev: image size does not match the camera");
  if (pg.cols() * pg.patch_size() != cam.width() || pg.rows() * pg.patch_size() != cam.height())
    throw DimensionError("extract_camera_bev: patch grid does not match the camera");
  if (fp.patches.size() != static_cast<std::size_t>(pg.count()))
    throw DimensionError("extract_camera_bev: footprint does not match the patch grid");
  if (!(fp.voxel_dims == bm.voxel_dims())) throw DimensionError("extract_camera_bev: footprint grid mismatch");
  if (mask) require_compatible(*mask, bm);

  const Dims3& md = bm.mask_dims();
  const std::size_t n_columns = static_cast<std::size_t>(md.x) * md.y;
  std::vector<double> hits(n_columns, 0.0), lum(n_columns, 0.0), grad(n_columns, 0.0);
  const double weight = 1.0 / fp.bins.count;

  auto splat = [&](std::uint32_t id) {
    if (id >= fp.patches.size()) throw std::out_of_range("extract_camera_bev: patch index out of range");
    if (counter) counter->patch_bins += static_cast<std::uint64_t>(fp.bins.count);
    const PatchDescriptor d = describe_patch(image, pg, static_cast<int>(id));
    for (const auto& e : fp.patches[id]) {
      const std::size_t block = block_of(bm, unflatten(bm.voxel_dims(), e.voxel));
      if (mask && !mask->kept(block)) continue;
      const std::size_t col = detail::column_of_block(md, block);
      hits[col] += weight;
      lum[col] += weight * d.luminance;
      grad[col] += weight * d.gradient;
    }
  };
  if (kept_patches) {
    for (auto id : *kept_patches) splat(id);
  } else {
    for (std::uint32_t id = 0; id < fp.patches.size(); ++id)
      if (!fp.patches[id].empty()) splat(id);
  }

  BevFeatureMap out(md.x, md.y, channel::camera_count);
  for (std::size_t col = 0; col < n_columns; ++col) {
    if (hits[col] == 0.0) continue;
    out.at(col, 0) = lum[col] / hits[col];
    out.at(col, 1) = grad[col] / hits[col];
    out.at(col, 2) = hits[col];
  }
  return out;
}

/// Channel concatenation without smoothing.
inline BevFeatureMap stack_bev(const BevFeatureMap& lidar, const BevFeatureMap& camera) {
  if (lidar.width() != camera.width() || lidar.height() != camera.height())
    throw DimensionError("stack_bev: map sizes differ");
  BevFeatureMap out(lidar.width(), lidar.height(), lidar.channels() + camera.channels());
  for (std::size_t col = 0; col < out.columns(); ++col) {
    for (int c = 0; c < lidar.channels(); ++c) out.at(col, c) = lidar.at(col, c);
    for (int c = 0; c < camera.channels(); ++c) out.at(col, lidar.channels() + c) = camera.at(col, c);
  }
  return out;
}

/// 3x3 box filter per channel, zero padding, divisor 9 everywhere. The operator
/// is symmetric, so it is also its own adjoint.
inline BevFeatureMap smooth_bev(const BevFeatureMap& in) {
  BevFeatureMap out(in.width(), in.height(), in.channels());
  for (int y = 0; y < in.height(); ++y) {
    for (int x = 0; x < in.width(); ++x) {
      for (int c = 0; c < in.channels(); ++c) {
        double acc = 0.0;
        for (int dy = -1; dy <= 1; ++dy) {
          const int yy = y + dy;
          if (yy < 0 || yy >= in.height()) continue;
          for (int dx = -1; dx <= 1; ++dx) {
            const int xx = x + dx;
            if (xx < 0 || xx >= in.width()) continue;
            acc += in.at(xx, yy, c);
          }
        }
        out.at(x, y, c) = acc / 9.0;
      }
    }
  }
  return out;
}

inline BevFeatureMap fuse_bev(const BevFeatureMap& lidar, const BevFeatureMap& camera) {
  return smooth_bev(stack_bev(lidar, camera));
}

// BEV dump: u32 W, H, C then W*H*C little-endian f32 values.
inline std::vector<std::uint8_t> encode_bev(const BevFeatureMap& map) {
  std::vector<std::uint8_t> out;
  bytes::put_u32(out, static_cast<std::uint32_t>(map.width()));
  bytes::put_u32(out, static_cast<std::uint32_t>(map.height()));
  bytes::put_u32(out, static_cast<std::uint32_t>(map.channels()));
  for (double v : map.values()) bytes::put_f32(out, static_cast<float>(v));
  return out;
}

inline BevFeatureMap decode_bev(std::span<const std::uint8_t> data, const std::string& path = "<memory>") {
  bytes::Reader in(data, path);
  const auto w = in.u32("W"), h = in.u32("H"), c = in.u32("channels");
  if (w == 0 || h == 0 || c == 0 || w > 65536 || h > 65536 || c > 1024) throw FormatError(path, 0, "invalid BEV header");
  BevFeatureMap map(static_cast<int>(w), static_cast<int>(h), static_cast<int>(c));
  if (in.remaining() != map.size() * 4) in.fail("BEV payload size mismatch");
  for (double& v : map.values()) v = in.f32("value");
  return map;
}

inline void write_bev(const std::filesystem::path& path, const BevFeatureMap& map) {
  bytes::write_file(path, encode_bev(map));
}

inline BevFeatureMap read_bev(const std::filesystem::path& path) {
  return decode_bev(bytes::read_file(path), path.string());
}

}  // namespace mjp
