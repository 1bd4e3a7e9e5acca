#pragma once

// Joint input pruning of one frame: the BEV mask is pushed back through the
// sensor calibration to delete LiDAR points (C -> C') and camera patches
// (L -> L') before any feature extraction happens.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mjp/data.hpp"
#include "mjp/features.hpp"
#include "mjp/projection.hpp"
#include "mjp/voxelgrid.hpp"

namespace mjp {

/// Everything that depends only on the grid configuration and the calibration.
struct Context {
  VoxelGridSpec spec;
  BlockMap bm;
  CameraModel cam;
  PatchGrid pg;
  FrustumFootprint fp;

  Context(VoxelGridSpec grid, const Dims3& mask_dims, CameraModel camera, int patch_size, const DepthBins& bins)
      : spec(std::move(grid)), bm(spec.dims(), mask_dims), cam(std::move(camera)), pg(cam, patch_size),
        fp(lift_patches(cam, pg, spec, bins)) {}

  const Dims3& mask_dims() const { return bm.mask_dims(); }
  std::size_t cells() const { return bm.mask_dims().count(); }

  void check_frame(const SceneFrame& frame) const {
    if (!(frame.cam == cam)) throw Error(ErrorKind::data, "frame calibration does not match the pipeline camera");
    if (frame.image.width != cam.width() || frame.image.height != cam.height())
      throw DimensionError("frame image does not match the camera");
  }
};

struct PruneOutcome {
  std::vector<std::uint32_t> kept_point_indices;
  std::vector<std::uint32_t> kept_patch_indices;
  double prune_ratio_voxels = 0.0;   // mask cells set to 0
  double prune_ratio_points = 0.0;   // in-range points removed by the mask
  double prune_ratio_patches = 0.0;  // patches removed (including empty-footprint ones)
  std::size_t total_points = 0;
  std::size_t in_range_points = 0;   // the remainder was pruned by geometry
  std::size_t total_patches = 0;
};

inline PruneOutcome prune_frame(const SceneFrame& frame, const MaskGrid& mask, const Context& ctx) {
  ctx.check_frame(frame);
  PruneOutcome out;
  out.kept_point_indices = index_multiply_lidar(mask, ctx.bm, ctx.spec, frame.points);
  out.kept_patch_indices = index_multiply_camera(mask, ctx.bm, ctx.fp);
  out.total_points = frame.points.size();
  for (const auto& p : frame.points)
    if (voxel_index(ctx.spec, p)) ++out.in_range_points;
  out.total_patches = ctx.fp.patches.size();
  out.prune_ratio_voxels = mask.zero_fraction();
  out.prune_ratio_points =
      out.in_range_points == 0
          ? 0.0
          : 1.0 - static_cast<double>(out.kept_point_indices.size()) / static_cast<double>(out.in_range_points);
  out.prune_ratio_patches =
      out.total_patches == 0
          ? 0.0
          : 1.0 - static_cast<double>(out.kept_patch_indices.size()) / static_cast<double>(out.total_patches);
  return out;
}

struct FrameBev {
  BevFeatureMap lidar;
  BevFeatureMap camera;
  BevFeatureMap stacked;  // before smoothing
  BevFeatureMap fused;
};

/// Feature extraction over the full frame (mask == nullptr) or over the inputs
/// retained by `mask`.
inline FrameBev extract_frame_bev(const SceneFrame& frame, const Context& ctx, const MaskGrid* mask = nullptr,
                                  OpCounter* counter = nullptr) {
  FrameBev out;
  if (mask) {
    const PruneOutcome po = prune_frame(frame, *mask, ctx);
    out.lidar = extract_lidar_bev(ctx.spec, ctx.bm, frame.points, std::span<const std::uint32_t>(po.kept_point_indices),
                                  mask, counter);
    out.camera = extract_camera_bev(ctx.cam, ctx.pg, ctx.fp, ctx.bm, frame.image,
                                    std::span<const std::uint32_t>(po.kept_patch_indices), mask, counter);
  } else {
    out.lidar = extract_lidar_bev(ctx.spec, ctx.bm, frame.points, std::nullopt, nullptr, counter);
    out.camera = extract_camera_bev(ctx.cam, ctx.pg, ctx.fp, ctx.bm, frame.image, std::nullopt, nullptr, counter);
  }
  out.stacked = stack_bev(out.lidar, out.camera);
  out.fused = smooth_bev(out.stacked);
  return out;
}

// Pruned-frame files -----------------------------------------------------------
//   points.bin          kept points, same record format as the input
//   kept_indices.bin    little-endian u32 source indices
//   patches.bits        u32 patch count, then LSB-first keep bits
//   mask.mjpm           the mask that produced them
//   manifest.json       {"kept_points","kept_point_indices_file","kept_patches","mask_file"}

inline std::vector<std::uint8_t> encode_patch_bits(std::span<const std::uint32_t> kept, std::size_t total) {
  std::vector<std::uint8_t> bits(total, 0);
  for (auto id : kept) bits.at(id) = 1;
  std::vector<std::uint8_t> out;
  bytes::put_u32(out, static_cast<std::uint32_t>(total));
  const auto packed = bytes::pack_bits(bits);
  out.insert(out.end(), packed.begin(), packed.end());
  return out;
}

inline std::vector<std::uint32_t> decode_patch_bits(std::span<const std::uint8_t> data, const std::string& path) {
  bytes::Reader in(data, path);
  const auto total = in.u32("patch count");
  const auto bits = bytes::unpack_bits(in, total);
  if (in.remaining() != 0) in.fail("trailing bytes after patch bitmap");
  std::vector<std::uint32_t> kept;
  for (std::uint32_t i = 0; i < total; ++i)
    if (bits[i]) kept.push_back(i);
  return kept;
}

inline std::vector<std::uint8_t> encode_indices(std::span<const std::uint32_t> idx) {
  std::vector<std::uint8_t> out;
  out.reserve(idx.size() * 4);
  for (auto i : idx) bytes::put_u32(out, i);
  return out;
}

inline std::vector<std::uint32_t> decode_indices(std::span<const std::uint8_t> data, const std::string& path) {
  if (data.size() % 4 != 0) throw FormatError(path, data.size() - data.size() % 4, "index file size is not a multiple of 4");
  bytes::Reader in(data, path);
  std::vector<std::uint32_t> out(data.size() / 4);
  for (auto& v : out) v = in.u32("index");
  return out;
}

inline void write_pruned_frame(const PruneOutcome& outcome, const SceneFrame& frame, const MaskGrid& mask,
                               const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorKind::data, "cannot create " + out_dir.string() + ": " + ec.message());
  std::vector<PointXYZI> kept;
  kept.reserve(outcome.kept_point_indices.size());
  for (auto i : outcome.kept_point_indices) kept.push_back(frame.points.at(i));
  write_pointcloud(out_dir / "points.bin", kept);
  bytes::write_file(out_dir / "kept_indices.bin", encode_indices(outcome.kept_point_indices));
  bytes::write_file(out_dir / "patches.bits", encode_patch_bits(outcome.kept_patch_indices, outcome.total_patches));
  write_mask(out_dir / "mask.mjpm", mask, true);
  nlohmann::json manifest;
  manifest["kept_points"] = outcome.kept_point_indices.size();
  manifest["kept_point_indices_file"] = "kept_indices.bin";
  manifest["kept_patches"] = outcome.kept_patch_indices;
  manifest["mask_file"] = "mask.mjpm";
  detail::write_json(out_dir / "manifest.json", manifest);
}

struct PrunedFrameFiles {
  std::vector<PointXYZI> points;
  std::vector<std::uint32_t> kept_point_indices;
  std::vector<std::uint32_t> kept_patch_indices;
  MaskGrid mask;
};

inline PrunedFrameFiles read_pruned_frame(const std::filesystem::path& dir) {
  const auto manifest = detail::read_json(dir / "manifest.json");
  try {
    const auto idx_path = dir / manifest.at("kept_point_indices_file").get<std::string>();
    PrunedFrameFiles f{read_pointcloud(dir / "points.bin"),
                       decode_indices(bytes::read_file(idx_path), idx_path.string()),
                       decode_patch_bits(bytes::read_file(dir / "patches.bits"), (dir / "patches.bits").string()),
                       read_mask(dir / manifest.at("mask_file").get<std::string>()).mask};
    if (f.kept_point_indices.size() != manifest.at("kept_points").get<std::size_t>() ||
        f.points.size() != f.kept_point_indices.size())
      throw Error(ErrorKind::data, (dir / "manifest.json").string() + ": kept point count mismatch");
    if (manifest.at("kept_patches").get<std::vector<std::uint32_t>>() != f.kept_patch_indices)
      throw Error(ErrorKind::data, (dir / "manifest.json").string() + ": kept patch list disagrees with patches.bits");
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::data, (dir / "manifest.json").string() + ": " + e.what());
  }
}

}  // namespace mjp
