#pragma once

// Both directions of the sensor <-> BEV mapping:
//  * lift_patches: forward (lift) projection of image patches onto the voxels
//    their center rays cross at D discrete depths;
//  * index_multiply_*: backward application of a BEV mask to raw LiDAR points
//    and camera patches.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "mjp/geometry.hpp"
#include "mjp/voxelgrid.hpp"

namespace mjp {

class PatchGrid {
 public:
  PatchGrid(int image_width, int image_height, int patch_size) : patch_size_(patch_size) {
    if (patch_size < 1) throw std::invalid_argument("PatchGrid: patch size must be positive");
    if (image_width % patch_size || image_height % patch_size)
      throw std::invalid_argument("PatchGrid: image dims must be multiples of the patch size");
    cols_ = image_width / patch_size;
    rows_ = image_height / patch_size;
  }

  PatchGrid(const CameraModel& cam, int patch_size) : PatchGrid(cam.width(), cam.height(), patch_size) {}

  int patch_size() const { return patch_size_; }
  int cols() const { return cols_; }
  int rows() const { return rows_; }
  int count() const { return cols_ * rows_; }

  int id(int col, int row) const { return row * cols_ + col; }
  int col(int id) const { return id % cols_; }
  int row(int id) const { return id / cols_; }

  double center_u(int id) const { return (col(id) + 0.5) * patch_size_; }
  double center_v(int id) const { return (row(id) + 0.5) * patch_size_; }

  /// Patch containing pixel coordinate (u, v); caller guarantees it is inside the image.
  int patch_at(double u, double v) const {
    const int c = std::min(cols_ - 1, static_cast<int>(u) / patch_size_);
    const int r = std::min(rows_ - 1, static_cast<int>(v) / patch_size_);
    return id(c, r);
  }

 private:
  int patch_size_;
  int cols_ = 0;
  int rows_ = 0;
};

struct FootprintEntry {
  std::uint32_t voxel = 0;  // flattened voxel index
  std::uint32_t depth_bin = 0;
};

struct DepthBins {
  int count = 16;
  double d_min = 1.0;
  double d_max = 12.0;

  /// Endpoint-inclusive linear spacing; a single bin sits at d_min.
  double depth(int k) const {
    if (count == 1) return d_min;
    return d_min + (d_max - d_min) * static_cast<double>(k) / static_cast<double>(count - 1);
  }
};

/// Per patch, the voxels its center ray visits at each depth bin, sorted by bin.
/// Depends only on camera and grid, so it is computed once per calibration.
struct FrustumFootprint {
  Dims3 voxel_dims;
  DepthBins bins;
  std::vector<std::vector<FootprintEntry>> patches;

  std::size_t total_entries() const {
    std::size_t n = 0;
    for (const auto& p : patches) n += p.size();
    return n;
  }
};

inline FrustumFootprint lift_patches(const CameraModel& cam, const PatchGrid& pg, const VoxelGridSpec& spec,
                                     const DepthBins& bins) {
  if (bins.count < 1) throw std::invalid_argument("lift_patches: need at least one depth bin");
  if (!(bins.d_min > 0.0 && bins.d_min < bins.d_max))
    throw std::invalid_argument("lift_patches: require 0 < d_min < d_max");
  if (pg.cols() * pg.patch_size() != cam.width() || pg.rows() * pg.patch_size() != cam.height())
    throw DimensionError("lift_patches: patch grid does not cover the camera image");

  FrustumFootprint fp{spec.dims(), bins, std::vector<std::vector<FootprintEntry>>(pg.count())};
  for (int id = 0; id < pg.count(); ++id) {
    auto& entries = fp.patches[id];
    for (int k = 0; k < bins.count; ++k) {
      const Vec3 p = unproject(cam, pg.center_u(id), pg.center_v(id), bins.depth(k));
      if (auto idx = voxel_index(spec, p))
        entries.push_back({static_cast<std::uint32_t>(flatten(spec.dims(), *idx)), static_cast<std::uint32_t>(k)});
    }
  }
  return fp;
}

/// Indices of points inside the grid whose mask block is retained, in input order.
inline std::vector<std::uint32_t> index_multiply_lidar(const MaskGrid& mask, const BlockMap& bm,
                                                       const VoxelGridSpec& spec, std::span<const PointXYZI> points) {
  require_compatible(mask, bm);
  if (!(bm.voxel_dims() == spec.dims())) throw DimensionError("index_multiply_lidar: block map does not match grid");
  std::vector<std::uint32_t> kept;
  kept.reserve(points.size());
  for (std::uint32_t i = 0; i < points.size(); ++i) {
    if (auto idx = voxel_index(spec, points[i]); idx && mask.kept(block_of(bm, *idx))) kept.push_back(i);
  }
  return kept;
}

/// A patch survives when at least one of its footprint voxels lies in a retained
/// block. Patches with empty footprints never survive.
inline bool patch_survives(const MaskGrid& mask, const BlockMap& bm, std::span<const FootprintEntry> entries) {
  for (const auto& e : entries)
    if (mask.kept(block_of(bm, unflatten(bm.voxel_dims(), e.voxel)))) return true;
  return false;
}

inline std::vector<std::uint32_t> index_multiply_camera(const MaskGrid& mask, const BlockMap& bm,
                                                        const FrustumFootprint& fp) {
  require_compatible(mask, bm);
  if (!(fp.voxel_dims == bm.voxel_dims())) throw DimensionError("index_multiply_camera: footprint grid mismatch");
  std::vector<std::uint32_t> kept;
  for (std::uint32_t id = 0; id < fp.patches.size(); ++id)
    if (patch_survives(mask, bm, fp.patches[id])) kept.push_back(id);
  return kept;
}

}  // namespace mjp
