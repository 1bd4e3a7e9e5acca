#pragma once

// Run configuration: one JSON object mirroring SceneConfig, TrainConfig, the
// grid and the camera lift. Unknown keys are rejected at every level; missing
// keys keep their defaults.

#include <cstdint>
#include <cstdlib>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "mjp/bench.hpp"
#include "mjp/data.hpp"
#include "mjp/predictor.hpp"
#include "mjp/pruning.hpp"

namespace mjp {

struct GridConfig {
  std::array<double, 3> min{-12.8, -12.8, -2.0};
  std::array<double, 3> max{12.8, 12.8, 2.0};
  std::array<double, 3> voxel{0.2, 0.2, 0.2};
  std::array<int, 3> mask_dims{32, 32, 4};

  static GridConfig desk() { return {}; }
  static GridConfig paper() { return {{-51.2, -51.2, -8.0}, {51.2, 51.2, 8.0}, {0.1, 0.1, 0.2}, {128, 128, 16}}; }

  VoxelGridSpec spec() const {
    return {Vec3(min[0], min[1], min[2]), Vec3(max[0], max[1], max[2]), Vec3(voxel[0], voxel[1], voxel[2])};
  }
  Dims3 dims() const { return {mask_dims[0], mask_dims[1], mask_dims[2]}; }
};

struct LiftConfig {
  int patch_size = 8;
  int depth_bins = 16;
  double d_min = 1.0;
  double d_max = 12.0;

  DepthBins bins() const { return {depth_bins, d_min, d_max}; }
};

struct RunConfig {
  std::uint64_t seed = 42;
  int jobs = 1;
  GridConfig grid;
  LiftConfig lift;
  SceneConfig scene;
  TrainConfig train;
  std::vector<double> ratios{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6};

  Context context() const {
    return Context(grid.spec(), grid.dims(), scene.camera(), lift.patch_size, lift.bins());
  }

  TrainConfig train_config() const {
    TrainConfig t = train;
    t.seed = seed;
    t.jobs = jobs;
    return t;
  }

  SweepConfig sweep_config() const {
    SweepConfig s;
    s.ratios = ratios;
    s.train = train_config();
    s.baseline_seed = seed;
    return s;
  }

  void validate() const {
    if (jobs < 1) throw std::invalid_argument("jobs must be >= 1");
    scene.validate();
    train.validate();
    for (double r : ratios)
      if (!(r >= 0.0 && r <= 1.0)) throw std::invalid_argument("ratios must lie in [0,1]");
    (void)grid.spec();
    BlockMap(grid.spec().dims(), grid.dims());
    if (lift.depth_bins < 1 || !(lift.d_min > 0.0 && lift.d_max > lift.d_min))
      throw std::invalid_argument("lift: need depth_bins >= 1 and 0 < d_min < d_max");
  }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
  const std::set<std::string> known(keys.begin(), keys.end());
  for (const auto& [k, _] : j.items())
    if (!known.count(k)) throw std::invalid_argument(where + ": unknown key '" + k + "'");
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline nlohmann::json config_to_json(const RunConfig& c) {
  const auto& s = c.scene;
  const auto& t = c.train;
  return {
      {"seed", c.seed},
      {"jobs", c.jobs},
      {"grid", {{"min", c.grid.min}, {"max", c.grid.max}, {"voxel", c.grid.voxel}, {"mask_dims", c.grid.mask_dims}}},
      {"lift", {{"patch_size", c.lift.patch_size}, {"depth_bins", c.lift.depth_bins}, {"d_min", c.lift.d_min}, {"d_max", c.lift.d_max}}},
      {"scene",
       {{"n_boxes_min", s.n_boxes_min}, {"n_boxes_max", s.n_boxes_max}, {"box_length", s.box_length},
        {"box_width", s.box_width}, {"box_height", s.box_height}, {"placement_extent", s.placement_extent},
        {"ground_z", s.ground_z}, {"wall_probability", s.wall_probability}, {"lidar_azimuth", s.lidar_azimuth},
        {"lidar_elevation", s.lidar_elevation}, {"elevation_min_deg", s.elevation_min_deg},
        {"elevation_max_deg", s.elevation_max_deg}, {"max_range", s.max_range}, {"noise_sigma", s.noise_sigma},
        {"camera_width", s.camera_width}, {"camera_height", s.camera_height}, {"camera_fx", s.camera_fx},
        {"camera_fy", s.camera_fy}, {"camera_position", s.camera_position}}},
      {"train",
       {{"alpha", t.alpha}, {"beta", t.beta}, {"gamma", t.gamma}, {"lambda", t.lambda}, {"ratio", t.ratio},
        {"theta", t.theta}, {"learning_rate", t.learning_rate}, {"head_learning_rate", t.head_learning_rate},
        {"epochs", t.epochs}, {"sparsity", to_string(t.sparsity)}}},
      {"ratios", c.ratios},
  };
}

/// Overlays `j` onto `base`.
inline RunConfig config_from_json(const nlohmann::json& j, RunConfig base = {}) {
  using detail::read_opt;
  try {
    detail::reject_unknown(j, "config", {"seed", "jobs", "grid", "lift", "scene", "train", "ratios"});
    read_opt(j, "seed", base.seed);
    read_opt(j, "jobs", base.jobs);
    read_opt(j, "ratios", base.ratios);
    if (j.contains("grid")) {
      const auto& g = j.at("grid");
      detail::reject_unknown(g, "config.grid", {"preset", "min", "max", "voxel", "mask_dims"});
      if (g.contains("preset")) {
        const auto p = g.at("preset").get<std::string>();
        if (p == "desk") base.grid = GridConfig::desk();
        else if (p == "paper") base.grid = GridConfig::paper();
        else throw std::invalid_argument("config.grid.preset: expected 'desk' or 'paper'");
      }
      read_opt(g, "min", base.grid.min);
      read_opt(g, "max", base.grid.max);
      read_opt(g, "voxel", base.grid.voxel);
      read_opt(g, "mask_dims", base.grid.mask_dims);
    }
    if (j.contains("lift")) {
      const auto& l = j.at("lift");
      detail::reject_unknown(l, "config.lift", {"patch_size", "depth_bins", "d_min", "d_max"});
      read_opt(l, "patch_size", base.lift.patch_size);
      read_opt(l, "depth_bins", base.lift.depth_bins);
      read_opt(l, "d_min", base.lift.d_min);
      read_opt(l, "d_max", base.lift.d_max);
    }
    if (j.contains("scene")) {
      const auto& s = j.at("scene");
      auto& o = base.scene;
      detail::reject_unknown(s, "config.scene",
                             {"n_boxes_min", "n_boxes_max", "box_length", "box_width", "box_height", "placement_extent",
                              "ground_z", "wall_probability", "lidar_azimuth", "lidar_elevation", "elevation_min_deg",
                              "elevation_max_deg", "max_range", "noise_sigma", "camera_width", "camera_height",
                              "camera_fx", "camera_fy", "camera_position"});
      read_opt(s, "n_boxes_min", o.n_boxes_min);
      read_opt(s, "n_boxes_max", o.n_boxes_max);
      read_opt(s, "box_length", o.box_length);
      read_opt(s, "box_width", o.box_width);
      read_opt(s, "box_height", o.box_height);
      read_opt(s, "placement_extent", o.placement_extent);
      read_opt(s, "ground_z", o.ground_z);
      read_opt(s, "wall_probability", o.wall_probability);
      read_opt(s, "lidar_azimuth", o.lidar_azimuth);
      read_opt(s, "lidar_elevation", o.lidar_elevation);
      read_opt(s, "elevation_min_deg", o.elevation_min_deg);
      read_opt(s, "elevation_max_deg", o.elevation_max_deg);
      read_opt(s, "max_range", o.max_range);
      read_opt(s, "noise_sigma", o.noise_sigma);
      read_opt(s, "camera_width", o.camera_width);
      read_opt(s, "camera_height", o.camera_height);
      read_opt(s, "camera_fx", o.camera_fx);
      read_opt(s, "camera_fy", o.camera_fy);
      read_opt(s, "camera_position", o.camera_position);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      auto& o = base.train;
      detail::reject_unknown(t, "config.train",
                             {"alpha", "beta", "gamma", "lambda", "ratio", "theta", "learning_rate",
                              "head_learning_rate", "epochs", "sparsity"});
      read_opt(t, "alpha", o.alpha);
      read_opt(t, "beta", o.beta);
      read_opt(t, "gamma", o.gamma);
      read_opt(t, "lambda", o.lambda);
      read_opt(t, "ratio", o.ratio);
      read_opt(t, "theta", o.theta);
      read_opt(t, "learning_rate", o.learning_rate);
      read_opt(t, "head_learning_rate", o.head_learning_rate);
      read_opt(t, "epochs", o.epochs);
      if (t.contains("sparsity")) o.sparsity = sparsity_mode_from_string(t.at("sparsity").get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  return base;
}

/// Seed from the MJP_SEED environment variable, if set.
inline std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("MJP_SEED");
  if (!v || !*v) return std::nullopt;
  char* end = nullptr;
  const unsigned long long s = std::strtoull(v, &end, 10);
  if (*end != '\0') throw std::invalid_argument(std::string("MJP_SEED is not an unsigned integer: ") + v);
  return s;
}

}  // namespace mjp
