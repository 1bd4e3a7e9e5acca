#pragma once

// BEV-anchored voxel grid, the coarser pruning mask grid, and the block
// correspondence between them.
//
// All dense arrays (voxels and mask cells) are flattened z-fastest, then x,
// then y:  j = (iy * nx + ix) * nz + iz.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mjp/bytes.hpp"
#include "mjp/geometry.hpp"
#include "mjp/point_cloud.hpp"

namespace mjp {

struct Dims3 {
  int x = 0;
  int y = 0;
  int z = 0;

  std::size_t count() const { return static_cast<std::size_t>(x) * y * z; }
  friend bool operator==(const Dims3&, const Dims3&) = default;
};

struct Index3 {
  int x = 0;
  int y = 0;
  int z = 0;

  friend bool operator==(const Index3&, const Index3&) = default;
};

inline std::size_t flatten(const Dims3& d, const Index3& i) {
  return (static_cast<std::size_t>(i.y) * d.x + i.x) * d.z + i.z;
}

inline Index3 unflatten(const Dims3& d, std::size_t j) {
  const int iz = static_cast<int>(j % d.z);
  const std::size_t xy = j / d.z;
  return {static_cast<int>(xy % d.x), static_cast<int>(xy / d.x), iz};
}

inline bool in_bounds(const Dims3& d, const Index3& i) {
  return i.x >= 0 && i.x < d.x && i.y >= 0 && i.y < d.y && i.z >= 0 && i.z < d.z;
}

class VoxelGridSpec {
 public:
  VoxelGridSpec(const Vec3& min_corner, const Vec3& max_corner, const Vec3& voxel_size)
      : min_(min_corner), max_(max_corner), voxel_(voxel_size) {
    int dims[3];
    for (int a = 0; a < 3; ++a) {
      if (!(max_[a] > min_[a])) throw std::invalid_argument("VoxelGridSpec: max_corner must exceed min_corner");
      if (!(voxel_[a] > 0.0)) throw std::invalid_argument("VoxelGridSpec: voxel size must be positive");
      const double ratio = (max_[a] - min_[a]) / voxel_[a];
      const double rounded = std::round(ratio);
      if (std::abs(ratio - rounded) > 1e-9 || rounded < 1.0)
        throw std::invalid_argument("VoxelGridSpec: extent is not an integral number of voxels");
      dims[a] = static_cast<int>(rounded);
    }
    dims_ = {dims[0], dims[1], dims[2]};
  }

  /// (-12.8, -12.8, -2) .. (12.8, 12.8, 2) at 0.2 m.
  static VoxelGridSpec desk() { return {Vec3(-12.8, -12.8, -2.0), Vec3(12.8, 12.8, 2.0), Vec3(0.2, 0.2, 0.2)}; }

  /// (-51.2, -51.2, -8) .. (51.2, 51.2, 8) at (0.1, 0.1, 0.2) m.
  static VoxelGridSpec paper() { return {Vec3(-51.2, -51.2, -8.0), Vec3(51.2, 51.2, 8.0), Vec3(0.1, 0.1, 0.2)}; }

  const Vec3& min_corner() const { return min_; }
  const Vec3& max_corner() const { return max_; }
  const Vec3& voxel_size() const { return voxel_; }
  const Dims3& dims() const { return dims_; }

  Vec3 voxel_center(const Index3& i) const {
    return {min_.x() + (i.x + 0.5) * voxel_.x(), min_.y() + (i.y + 0.5) * voxel_.y(),
            min_.z() + (i.z + 0.5) * voxel_.z()};
  }

 private:
  Vec3 min_, max_, voxel_;
  Dims3 dims_;
};

inline Dims3 grid_dims(const VoxelGridSpec& spec) { return spec.dims(); }

/// floor((p - min) / voxel) per axis; nullopt outside [0, dims).
inline std::optional<Index3> voxel_index(const VoxelGridSpec& spec, const Vec3& p) {
  const auto& d = spec.dims();
  const int n[3] = {d.x, d.y, d.z};
  int idx[3];
  for (int a = 0; a < 3; ++a) {
    const double f = std::floor((p[a] - spec.min_corner()[a]) / spec.voxel_size()[a]);
    if (!(f >= 0.0 && f < n[a])) return std::nullopt;
    idx[a] = static_cast<int>(f);
  }
  return Index3{idx[0], idx[1], idx[2]};
}

inline std::optional<Index3> voxel_index(const VoxelGridSpec& spec, const PointXYZI& p) {
  return voxel_index(spec, Vec3(p.x, p.y, p.z));
}

class BlockMap {
 public:
  BlockMap(const Dims3& voxel_dims, const Dims3& mask_dims) : voxel_dims_(voxel_dims), mask_dims_(mask_dims) {
    if (mask_dims.x < 1 || mask_dims.y < 1 || mask_dims.z < 1 || voxel_dims.x < 1 || voxel_dims.y < 1 ||
        voxel_dims.z < 1)
      throw DimensionError("BlockMap: dimensions must be positive");
    if (voxel_dims.x % mask_dims.x || voxel_dims.y % mask_dims.y || voxel_dims.z % mask_dims.z)
      throw DimensionError("BlockMap: voxel dims must be integer multiples of mask dims");
    block_ = {voxel_dims.x / mask_dims.x, voxel_dims.y / mask_dims.y, voxel_dims.z / mask_dims.z};
  }

  const Dims3& voxel_dims() const { return voxel_dims_; }
  const Dims3& mask_dims() const { return mask_dims_; }
  const Dims3& block() const { return block_; }

  Index3 mask_cell(const Index3& voxel) const {
    if (!in_bounds(voxel_dims_, voxel)) throw std::out_of_range("BlockMap: voxel index out of bounds");
    return {voxel.x / block_.x, voxel.y / block_.y, voxel.z / block_.z};
  }

 private:
  Dims3 voxel_dims_, mask_dims_, block_;
};

inline std::size_t block_of(const BlockMap& bm, const Index3& voxel) {
  return flatten(bm.mask_dims(), bm.mask_cell(voxel));
}

/// Default mask resolution for a grid: 32x32x4 for the desk grid and
/// 128x128x16 for the full-size grid.
inline Dims3 default_mask_dims(const VoxelGridSpec& spec) {
  const auto& d = spec.dims();
  if (d == Dims3{1024, 1024, 80}) return {128, 128, 16};
  if (d == Dims3{128, 128, 20}) return {32, 32, 4};
  throw std::invalid_argument("default_mask_dims: no default for this grid; set mask_dims explicitly");
}

// ---------------------------------------------------------------------------

/// Importance scores and the binary pruning index over the W x H x Z mask grid.
/// Invariant: mask[j] == (scores[j] >= threshold).
class MaskGrid {
 public:
  MaskGrid(const Dims3& dims, std::vector<float> scores, float threshold)
      : dims_(dims), scores_(std::move(scores)), threshold_(threshold) {
    if (dims.x < 1 || dims.y < 1 || dims.z < 1) throw DimensionError("MaskGrid: dims must be positive");
    if (scores_.size() != dims.count()) throw DimensionError("MaskGrid: score count does not match dims");
    if (!(threshold > 0.0f && threshold < 1.0f)) throw std::invalid_argument("MaskGrid: threshold must be in (0,1)");
    mask_.resize(scores_.size());
    for (std::size_t j = 0; j < scores_.size(); ++j) {
      check_score(scores_[j]);
      mask_[j] = scores_[j] >= threshold_ ? 1 : 0;
    }
  }

  /// Mask given directly as bits; scores are set to the bits themselves.
  static MaskGrid from_bits(const Dims3& dims, std::span<const std::uint8_t> bits, float threshold = 0.5f) {
    std::vector<float> s(bits.size());
    for (std::size_t j = 0; j < bits.size(); ++j) s[j] = bits[j] ? 1.0f : 0.0f;
    return MaskGrid(dims, std::move(s), threshold);
  }

  static MaskGrid all(const Dims3& dims, bool keep) {
    return MaskGrid(dims, std::vector<float>(dims.count(), keep ? 1.0f : 0.0f), 0.5f);
  }

  const Dims3& dims() const { return dims_; }
  std::size_t size() const { return mask_.size(); }
  float threshold() const { return threshold_; }
  std::span<const float> scores() const { return scores_; }
  std::span<const std::uint8_t> bits() const { return mask_; }
  bool kept(std::size_t j) const { return mask_[j] != 0; }

  void set_score(std::size_t j, float s) {
    check_score(s);
    scores_.at(j) = s;
    mask_[j] = s >= threshold_ ? 1 : 0;
  }

  std::size_t zeros() const { return static_cast<std::size_t>(std::count(mask_.begin(), mask_.end(), 0)); }
  double zero_fraction() const { return static_cast<double>(zeros()) / static_cast<double>(size()); }

  /// True when every bit equals a fresh binarization of the scores.
  bool consistent() const {
    for (std::size_t j = 0; j < size(); ++j)
      if (mask_[j] != (scores_[j] >= threshold_ ? 1 : 0)) return false;
    return true;
  }

  /// a <= b bitwise.
  friend bool mask_leq(const MaskGrid& a, const MaskGrid& b) {
    if (!(a.dims_ == b.dims_)) return false;
    for (std::size_t j = 0; j < a.size(); ++j)
      if (a.mask_[j] > b.mask_[j]) return false;
    return true;
  }

 private:
  static void check_score(float s) {
    if (!(s >= 0.0f && s <= 1.0f)) throw std::invalid_argument("MaskGrid: score outside [0,1]");
  }

  Dims3 dims_;
  std::vector<float> scores_;
  std::vector<std::uint8_t> mask_;
  float threshold_;
};

inline void require_compatible(const MaskGrid& mask, const BlockMap& bm) {
  if (!(mask.dims() == bm.mask_dims())) throw DimensionError("mask dims do not match the block map");
}

// ---------------------------------------------------------------------------
// "MJPM" mask file: magic 4D 4A 50 4D, u8 version (1), u32 W, H, Z, f32 threshold,
// bit-packed mask (LSB first), then optionally W*H*Z f32 scores.

inline constexpr std::uint8_t kMaskMagic[4] = {0x4D, 0x4A, 0x50, 0x4D};
inline constexpr std::uint8_t kMaskVersion = 1;

inline std::vector<std::uint8_t> encode_mask(const MaskGrid& mask, bool with_scores) {
  std::vector<std::uint8_t> out(std::begin(kMaskMagic), std::end(kMaskMagic));
  out.push_back(kMaskVersion);
  bytes::put_u32(out, static_cast<std::uint32_t>(mask.dims().x));
  bytes::put_u32(out, static_cast<std::uint32_t>(mask.dims().y));
  bytes::put_u32(out, static_cast<std::uint32_t>(mask.dims().z));
  bytes::put_f32(out, mask.threshold());
  const auto packed = bytes::pack_bits(mask.bits());
  out.insert(out.end(), packed.begin(), packed.end());
  if (with_scores)
    for (float s : mask.scores()) bytes::put_f32(out, s);
  return out;
}

struct DecodedMask {
  MaskGrid mask;
  bool has_scores;
};

inline DecodedMask decode_mask(std::span<const std::uint8_t> data, const std::string& path = "<memory>") {
  bytes::Reader in(data, path);
  auto magic = in.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), std::begin(kMaskMagic))) throw FormatError(path, 0, "bad magic (expected MJPM)");
  const auto version = in.u8("version");
  if (version != kMaskVersion) throw FormatError(path, 4, "unsupported version " + std::to_string(version));
  const auto w = in.u32("W"), h = in.u32("H"), z = in.u32("Z");
  if (w == 0 || h == 0 || z == 0 || w > (1u << 16) || h > (1u << 16) || z > (1u << 16))
    throw FormatError(path, 5, "invalid dims");
  const float threshold = in.f32("threshold");
  if (!(threshold > 0.0f && threshold < 1.0f)) throw FormatError(path, 17, "threshold outside (0,1)");
  const Dims3 dims{static_cast<int>(w), static_cast<int>(h), static_cast<int>(z)};
  const std::size_t n = dims.count();
  const auto bits = bytes::unpack_bits(in, n);
  if (in.remaining() == 0) {
    return {MaskGrid::from_bits(dims, bits, threshold), false};
  }
  if (in.remaining() != n * 4) in.fail("trailing bytes are neither empty nor a full score block");
  std::vector<float> scores(n);
  for (auto& s : scores) {
    const std::size_t at = in.offset();
    s = in.f32("score");
    if (!(s >= 0.0f && s <= 1.0f)) throw FormatError(path, at, "score outside [0,1]");
  }
  MaskGrid grid(dims, std::move(scores), threshold);
  if (!std::equal(bits.begin(), bits.end(), grid.bits().begin()))
    throw FormatError(path, 21, "mask bits disagree with scores and threshold");
  return {std::move(grid), true};
}

inline void write_mask(const std::filesystem::path& path, const MaskGrid& mask, bool with_scores = true) {
  bytes::write_file(path, encode_mask(mask, with_scores));
}

inline DecodedMask read_mask(const std::filesystem::path& path) {
  return decode_mask(bytes::read_file(path), path.string());
}

// ---------------------------------------------------------------------------

struct VoxelBucket {
  std::size_t voxel = 0;  // flattened voxel index
  std::vector<std::uint32_t> points;
};

struct Voxelization {
  std::vector<VoxelBucket> buckets;  // ascending voxel index
  std::vector<std::uint32_t> discarded;

  std::size_t bucketed_count() const {
    std::size_t n = 0;
    for (const auto& b : buckets) n += b.points.size();
    return n;
  }
};

/// Bins points into voxels. Each in-range point lands in exactly one bucket
/// (input order preserved within a bucket); the rest go to `discarded`.
inline Voxelization voxelize(const VoxelGridSpec& spec, std::span<const PointXYZI> points) {
  Voxelization out;
  std::vector<std::pair<std::size_t, std::uint32_t>> keyed;
  keyed.reserve(points.size());
  for (std::uint32_t i = 0; i < points.size(); ++i) {
    if (auto idx = voxel_index(spec, points[i]))
      keyed.emplace_back(flatten(spec.dims(), *idx), i);
    else
      out.discarded.push_back(i);
  }
  std::stable_sort(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  for (const auto& [voxel, i] : keyed) {
    if (out.buckets.empty() || out.buckets.back().voxel != voxel) out.buckets.push_back({voxel, {}});
    out.buckets.back().points.push_back(i);
  }
  return out;
}

/// Mask cell (flattened) of each point, or -1 when the point is outside the grid.
inline std::vector<std::int64_t> point_blocks(const VoxelGridSpec& spec, const BlockMap& bm,
                                              std::span<const PointXYZI> points) {
  std::vector<std::int64_t> out(points.size(), -1);
  for (std::size_t i = 0; i < points.size(); ++i)
    if (auto idx = voxel_index(spec, points[i])) out[i] = static_cast<std::int64_t>(block_of(bm, *idx));
  return out;
}

}  // namespace mjp
