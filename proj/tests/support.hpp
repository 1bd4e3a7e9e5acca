#pragma once

// Shared fixtures for the unit tests and the acceptance binary.

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <string>
#include <vector>

#include "mjp/mjp.hpp"

namespace mjp::test {

inline Context desk_context() {
  return Context(VoxelGridSpec::desk(), {32, 32, 4}, SceneConfig{}.camera(), 8, DepthBins{16, 1.0, 12.0});
}

/// Default synthetic scenes, scene i seeded with derive_seed(seed, i).
inline std::vector<SceneFrame> make_frames(std::size_t n, std::uint64_t seed = 42, const SceneConfig& cfg = {}) {
  std::vector<SceneFrame> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_scene(cfg, derive_seed(seed, i)));
  return out;
}

/// Bernoulli(keep) bits.
inline MaskGrid random_mask_bits(const Dims3& dims, Rng& rng, double keep) {
  std::vector<std::uint8_t> bits(dims.count());
  for (auto& b : bits) b = rng.uniform() < keep ? 1 : 0;
  return MaskGrid::from_bits(dims, bits);
}

/// Clears a random subset of the kept bits of `m`, so the result is <= m.
inline MaskGrid random_submask(const MaskGrid& m, Rng& rng, double drop) {
  std::vector<std::uint8_t> bits(m.bits().begin(), m.bits().end());
  for (auto& b : bits)
    if (b && rng.uniform() < drop) b = 0;
  return MaskGrid::from_bits(m.dims(), bits);
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("mjp_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

}  // namespace mjp::test
