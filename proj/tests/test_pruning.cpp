#include <gtest/gtest.h>

#include "support.hpp"

using namespace mjp;

namespace {

struct Fixture {
  Context ctx = test::desk_context();
  SceneFrame frame = test::make_frames(1, 99).front();
};

}  // namespace

TEST(Pruning, AllOnesMask) {
  Fixture f;
  const auto po = prune_frame(f.frame, MaskGrid::all(f.ctx.mask_dims(), true), f.ctx);
  EXPECT_EQ(po.prune_ratio_voxels, 0.0);
  EXPECT_EQ(po.prune_ratio_points, 0.0);
  EXPECT_EQ(po.kept_point_indices.size(), po.in_range_points);
  EXPECT_GT(po.total_points, po.in_range_points);  // some returns land outside the grid
}

TEST(Pruning, AllZerosMask) {
  Fixture f;
  const auto po = prune_frame(f.frame, MaskGrid::all(f.ctx.mask_dims(), false), f.ctx);
  EXPECT_EQ(po.prune_ratio_voxels, 1.0);
  EXPECT_EQ(po.prune_ratio_points, 1.0);
  EXPECT_EQ(po.prune_ratio_patches, 1.0);
  EXPECT_TRUE(po.kept_point_indices.empty());
  EXPECT_TRUE(po.kept_patch_indices.empty());
}

TEST(Pruning, HalfMaskComposesIndexOps) {
  Fixture f;
  const Dims3 md = f.ctx.mask_dims();
  std::vector<std::uint8_t> bits(md.count());
  for (std::size_t j = 0; j < bits.size(); ++j) bits[j] = (j / 4) % 2;  // alternate whole columns
  const auto mask = MaskGrid::from_bits(md, bits);
  ASSERT_EQ(mask.zero_fraction(), 0.5);
  const auto po = prune_frame(f.frame, mask, f.ctx);
  EXPECT_EQ(po.kept_point_indices, index_multiply_lidar(mask, f.ctx.bm, f.ctx.spec, f.frame.points));
  EXPECT_EQ(po.kept_patch_indices, index_multiply_camera(mask, f.ctx.bm, f.ctx.fp));
  EXPECT_EQ(po.prune_ratio_voxels, 0.5);
  EXPECT_EQ(po.prune_ratio_points,
            1.0 - static_cast<double>(po.kept_point_indices.size()) / static_cast<double>(po.in_range_points));
}

TEST(Pruning, Idempotent) {
  Fixture f;
  Rng rng(3);
  const auto mask = test::random_mask_bits(f.ctx.mask_dims(), rng, 0.5);
  const auto po = prune_frame(f.frame, mask, f.ctx);
  SceneFrame again = f.frame;
  again.points.clear();
  for (auto i : po.kept_point_indices) again.points.push_back(f.frame.points[i]);
  const auto po2 = prune_frame(again, mask, f.ctx);
  EXPECT_EQ(po2.kept_point_indices.size(), again.points.size());
  EXPECT_EQ(po2.kept_patch_indices, po.kept_patch_indices);
  EXPECT_EQ(po2.prune_ratio_points, 0.0);
}

TEST(Pruning, RejectsForeignCalibration) {
  Fixture f;
  SceneConfig other;
  other.camera_fx = 30.0;
  SceneFrame frame = f.frame;
  frame.cam = other.camera();
  EXPECT_THROW(prune_frame(frame, MaskGrid::all(f.ctx.mask_dims(), true), f.ctx), Error);
}

TEST(Pruning, WriteReadRoundTrip) {
  Fixture f;
  test::TempDir dir("prune");
  Rng rng(6);
  const auto mask = test::random_mask_bits(f.ctx.mask_dims(), rng, 0.5);
  const auto po = prune_frame(f.frame, mask, f.ctx);
  write_pruned_frame(po, f.frame, mask, dir.path() / "a");
  const auto back = read_pruned_frame(dir.path() / "a");
  EXPECT_EQ(back.kept_point_indices, po.kept_point_indices);
  EXPECT_EQ(back.kept_patch_indices, po.kept_patch_indices);
  ASSERT_EQ(back.points.size(), po.kept_point_indices.size());
  for (std::size_t k = 0; k < back.points.size(); ++k) EXPECT_EQ(back.points[k], f.frame.points[po.kept_point_indices[k]]);
  EXPECT_TRUE(std::equal(mask.bits().begin(), mask.bits().end(), back.mask.bits().begin()));

  // Deterministic bytes.
  write_pruned_frame(po, f.frame, mask, dir.path() / "b");
  for (const char* name : {"points.bin", "kept_indices.bin", "patches.bits", "mask.mjpm", "manifest.json"})
    EXPECT_EQ(bytes::read_file(dir.path() / "a" / name), bytes::read_file(dir.path() / "b" / name)) << name;
}

TEST(Pruning, EmptyAndFullOutputs) {
  Fixture f;
  test::TempDir dir("prune_edge");
  const auto zero = MaskGrid::all(f.ctx.mask_dims(), false);
  write_pruned_frame(prune_frame(f.frame, zero, f.ctx), f.frame, zero, dir.path() / "z");
  EXPECT_EQ(std::filesystem::file_size(dir.path() / "z" / "points.bin"), 0u);
  EXPECT_TRUE(read_pruned_frame(dir.path() / "z").points.empty());

  PruneOutcome all;
  all.total_patches = f.ctx.fp.patches.size();
  for (std::uint32_t id = 0; id < all.total_patches; ++id) all.kept_patch_indices.push_back(id);
  const auto ones = MaskGrid::all(f.ctx.mask_dims(), true);
  write_pruned_frame(all, f.frame, ones, dir.path() / "o");
  const auto bits = bytes::read_file(dir.path() / "o" / "patches.bits");
  ASSERT_EQ(bits.size(), 4 + (all.total_patches + 7) / 8);
  for (std::size_t i = 4; i < bits.size(); ++i) EXPECT_EQ(bits[i], 0xFF);
}
