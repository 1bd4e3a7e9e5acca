#pragma once

// Cost model and ratio sweep. Cost is an exact tally of backbone work:
//   cost = lidar_blocks * c_voxel + patch_bins * c_patch + c_predictor
// where lidar_blocks counts retained mask blocks visited by the LiDAR backbone
// and patch_bins counts kept patches times depth bins lifted by the camera
// backbone. Wall-clock is measured but kept out of the deterministic report.

#include <chrono>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mjp/predictor.hpp"
#include "mjp/rng.hpp"

namespace mjp {

struct CostModel {
  std::uint64_t c_voxel = 0;      // per active block: one visit per voxel in the block
  std::uint64_t c_patch = 0;      // per kept patch and depth bin: one splat per camera channel
  std::uint64_t c_predictor = 0;  // per frame: one multiply-add per cell feature

  static CostModel for_context(const Context& ctx) {
    return {ctx.bm.block().count(), static_cast<std::uint64_t>(channel::camera_count),
            ctx.cells() * static_cast<std::uint64_t>(kCellFeatureCount)};
  }

  std::uint64_t cost(const OpCounter& c) const { return c.lidar_blocks * c_voxel + c.patch_bins * c_patch + c_predictor; }
};

inline nlohmann::json cost_model_to_json(const CostModel& m) {
  return {{"c_voxel", m.c_voxel}, {"c_patch", m.c_patch}, {"c_predictor", m.c_predictor}};
}

/// Counted cost of running the backbones on `frame` pruned by `mask`.
inline std::uint64_t frame_cost(const SceneFrame& frame, const Context& ctx, const MaskGrid& mask, const CostModel& m) {
  OpCounter c;
  extract_frame_bev(frame, ctx, &mask, &c);
  return m.cost(c);
}

/// Seeded random baseline: uniform scores, then the same top-k rule as the predictor.
inline MaskGrid random_mask(const Dims3& dims, double ratio, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> s(dims.count());
  for (auto& v : s) v = rng.uniform();
  return top_k_mask(dims, s, ratio);
}

struct SweepConfig {
  std::vector<double> ratios{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  TrainConfig train;  // finetuning schedule and loss weights
  std::uint64_t baseline_seed = 42;
};

struct MethodResult {
  double mean_cost = 0.0;
  double cost_reduction = 0.0;       // 1 - mean_cost / unpruned mean cost
  double mean_p = 0.0;               // hard IoU after finetuning
  double mean_p_before = 0.0;        // hard IoU of the unfinetuned head
  double zero_fraction = 0.0;
  double prune_ratio_points = 0.0;
  double prune_ratio_patches = 0.0;
  LossBreakdown loss;
  std::vector<std::uint64_t> costs;  // per frame
  TaskHead head;
};

struct SweepEntry {
  double ratio = 0.0;
  MethodResult predictor;
  MethodResult random;
  double wall_ms = 0.0;
};

struct SweepReport {
  CostModel cost_model;
  double unpruned_cost = 0.0;
  double anchor_p = 0.0;       // hard IoU of the starting head on unpruned inputs
  double p_original = 0.0;     // soft IoU anchor used by the penalty
  std::vector<SweepEntry> entries;
  double total_wall_ms = 0.0;
};

namespace detail {

inline MethodResult evaluate_masks(std::span<const SceneFrame> frames, const Context& ctx, const TrainingSet& set,
                                   std::span<const MaskGrid> masks, double ratio, const TaskHead& start,
                                   double p_original, const CostModel& model, double unpruned_cost,
                                   const SweepConfig& cfg) {
  MethodResult r;
  std::vector<OpCounter> counters;
  const auto maps = pruned_features(frames, ctx, masks, cfg.train.jobs, &counters);
  const auto ft = finetune_head(set, maps, start, p_original, cfg.train);
  r.head = ft.head;
  r.mean_p = ft.p_masked_after;
  r.mean_p_before = ft.p_masked_before;
  const double inv = 1.0 / static_cast<double>(frames.size());
  double cons = 0.0, task = 0.0, soft_p = 0.0, sparse = 0.0;
  for (std::size_t f = 0; f < frames.size(); ++f) {
    const auto cost = model.cost(counters[f]);
    r.costs.push_back(cost);
    r.mean_cost += static_cast<double>(cost) / static_cast<double>(frames.size());
    r.zero_fraction += inv * masks[f].zero_fraction();
    const PruneOutcome po = prune_frame(frames[f], masks[f], ctx);
    r.prune_ratio_points += inv * po.prune_ratio_points;
    r.prune_ratio_patches += inv * po.prune_ratio_patches;
    task += inv * task_loss(r.head, maps[f], set.frames[f].truth);
    cons += inv * consistency_loss(set.frames[f].fused, maps[f]);
    soft_p += inv * soft_performance(r.head, maps[f], set.frames[f].truth);
    std::vector<double> bits(masks[f].bits().begin(), masks[f].bits().end());
    sparse += inv * sparsity_loss(bits, ratio);
  }
  r.cost_reduction = unpruned_cost > 0.0 ? 1.0 - r.mean_cost / unpruned_cost : 0.0;
  r.loss = total_loss(task, cons, sparse, penalty_loss(p_original, soft_p, cfg.train.lambda), cfg.train.weights());
  return r;
}

}  // namespace detail

/// For each ratio: top-k predictor masks and seeded random masks per frame,
/// hard pruning, extraction with exact op counting, head finetuning from
/// `head`, and evaluation.
inline SweepReport run_sweep(std::span<const SceneFrame> frames, const Context& ctx, const TrainingSet& set,
                             const PredictorWeights& pw, const TaskHead& head, double p_original,
                             const SweepConfig& cfg) {
  using clock = std::chrono::steady_clock;
  const auto t_start = clock::now();
  if (frames.empty() || frames.size() != set.frames.size()) throw DimensionError("run_sweep: frame count mismatch");
  for (double r : cfg.ratios)
    if (!(r >= 0.0 && r <= 1.0)) throw std::invalid_argument("run_sweep: ratio outside [0,1]");

  SweepReport rep;
  rep.cost_model = CostModel::for_context(ctx);
  rep.p_original = p_original;
  const std::vector<MaskGrid> full(frames.size(), MaskGrid::all(ctx.mask_dims(), true));
  {
    std::vector<OpCounter> counters;
    const auto maps = pruned_features(frames, ctx, full, cfg.train.jobs, &counters);
    for (std::size_t f = 0; f < frames.size(); ++f)
      rep.unpruned_cost += static_cast<double>(rep.cost_model.cost(counters[f])) / static_cast<double>(frames.size());
    rep.anchor_p = mean_iou(head, maps, set);
  }

  for (std::size_t ri = 0; ri < cfg.ratios.size(); ++ri) {
    const auto t0 = clock::now();
    const double ratio = cfg.ratios[ri];
    SweepEntry e;
    e.ratio = ratio;
    const auto pred_masks = predictor_masks(set, pw, ratio);
    std::vector<MaskGrid> rand_masks;
    rand_masks.reserve(frames.size());
    for (std::size_t f = 0; f < frames.size(); ++f)
      rand_masks.push_back(
          random_mask(ctx.mask_dims(), ratio, derive_seed(cfg.baseline_seed, (static_cast<std::uint64_t>(ri) << 32) | f)));
    e.predictor = detail::evaluate_masks(frames, ctx, set, pred_masks, ratio, head, p_original, rep.cost_model,
                                         rep.unpruned_cost, cfg);
    e.random = detail::evaluate_masks(frames, ctx, set, rand_masks, ratio, head, p_original, rep.cost_model,
                                      rep.unpruned_cost, cfg);
    e.wall_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    rep.entries.push_back(std::move(e));
  }
  rep.total_wall_ms = std::chrono::duration<double, std::milli>(clock::now() - t_start).count();
  return rep;
}

inline nlohmann::json loss_to_json(const LossBreakdown& l) {
  return {{"task", l.task}, {"cons", l.cons}, {"sparse", l.sparse}, {"penalty", l.penalty}, {"total", l.total}};
}

inline nlohmann::json method_to_json(const MethodResult& m) {
  return {{"mean_cost", m.mean_cost},
          {"cost_reduction", m.cost_reduction},
          {"mean_p", m.mean_p},
          {"mean_p_before_finetune", m.mean_p_before},
          {"zero_fraction", m.zero_fraction},
          {"prune_ratio_points", m.prune_ratio_points},
          {"prune_ratio_patches", m.prune_ratio_patches},
          {"loss", loss_to_json(m.loss)},
          {"costs", m.costs}};
}

/// Deterministic part of the report (no timings). nlohmann::json sorts object keys.
inline nlohmann::json report_to_json(const SweepReport& r) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : r.entries)
    entries.push_back({{"ratio", e.ratio}, {"predictor", method_to_json(e.predictor)}, {"random", method_to_json(e.random)}});
  return {{"cost_model", cost_model_to_json(r.cost_model)},
          {"unpruned_cost", r.unpruned_cost},
          {"anchor_p", r.anchor_p},
          {"p_original", r.p_original},
          {"sweep", entries}};
}

inline nlohmann::json timing_to_json(const SweepReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& e : r.entries) per.push_back({{"ratio", e.ratio}, {"wall_ms", e.wall_ms}});
  return {{"total_wall_ms", r.total_wall_ms}, {"sweep", per}};
}

}  // namespace mjp
