#pragma once

// End-to-end orchestration used by the CLI. Every step reads its inputs from
// and writes its outputs under a run directory:
//
//   stage1/{head.json, anchor.json, log.jsonl}
//   stage2/{weights.json, log.jsonl}
//   stage3/{weights.json, head.json, log.jsonl}
//   stage4/{head.json, summary.json, log.jsonl}
//   masks/scene_NNNNN.mjpm
//   pruned/scene_NNNNN/...
//   eval.json
//   bench/{report.json, timing.json}
//   viz/{p_vs_ratio.ppm, cost_vs_ratio.ppm}
//
// A step whose prerequisites are missing throws PrerequisiteError.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "mjp/bench.hpp"
#include "mjp/config.hpp"
#include "mjp/viz.hpp"

namespace mjp {

namespace fs = std::filesystem;

namespace detail {

inline void require_file(const fs::path& p, const std::string& produced_by) {
  if (!fs::is_regular_file(p)) throw PrerequisiteError("missing " + p.string() + " (run " + produced_by + " first)");
}

inline void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw Error(ErrorKind::data, "cannot create " + p.string() + ": " + ec.message());
}

inline void write_log(const fs::path& path, const std::string& stage, const std::vector<EpochRecord>& history) {
  std::string text;
  for (const auto& r : history) text += epoch_to_json(stage, r).dump() + "\n";
  write_text(path, text);
}

template <typename Fn>
auto parse_artifact(const fs::path& path, Fn&& fn) {
  const auto j = detail::read_json(path);
  try {
    return fn(j);
  } catch (const std::exception& e) {
    throw Error(ErrorKind::data, path.string() + ": " + e.what());
  }
}

}  // namespace detail

struct Dataset {
  std::vector<fs::path> dirs;
  std::vector<SceneFrame> frames;
};

inline Dataset load_dataset(const fs::path& root, const RunConfig& cfg) {
  Dataset d;
  d.dirs = list_scenes(root);
  std::vector<std::optional<SceneFrame>> loaded(d.dirs.size());
  parallel_for(d.dirs.size(), cfg.jobs, [&](std::size_t i) { loaded[i].emplace(read_scene(d.dirs[i])); });
  d.frames.reserve(loaded.size());
  for (auto& f : loaded) d.frames.push_back(std::move(*f));
  return d;
}

inline TaskHead load_head(const fs::path& p) { return detail::parse_artifact(p, head_from_json); }
inline PredictorWeights load_weights(const fs::path& p) { return detail::parse_artifact(p, weights_from_json); }

inline double load_p_original(const fs::path& run) {
  const auto path = run / "stage1" / "anchor.json";
  detail::require_file(path, "train --stage task");
  return detail::parse_artifact(path, [](const nlohmann::json& j) { return j.at("p_original").get<double>(); });
}

// gen ---------------------------------------------------------------------------

inline void run_gen(const RunConfig& cfg, std::size_t scenes, const fs::path& out) {
  if (scenes == 0) throw Error(ErrorKind::usage, "--scenes must be >= 1");
  cfg.scene.validate();
  detail::ensure_dir(out);
  parallel_for(scenes, cfg.jobs, [&](std::size_t i) {
    write_scene(out / scene_dir_name(i), generate_scene(cfg.scene, derive_seed(cfg.seed, i)));
  });
}

// train -------------------------------------------------------------------------

struct Prepared {
  Dataset data;
  Context ctx;
  TrainingSet set;
};

inline Prepared prepare(const RunConfig& cfg, const fs::path& data_root) {
  Dataset d = load_dataset(data_root, cfg);
  Context ctx = cfg.context();
  for (std::size_t i = 0; i < d.frames.size(); ++i) {
    if (!(d.frames[i].cam == ctx.cam))
      throw Error(ErrorKind::data, (d.dirs[i] / "calib.json").string() + ": calibration differs from the configured camera");
  }
  TrainingSet set = prepare_training_set(d.frames, ctx, cfg.jobs);
  return {std::move(d), std::move(ctx), std::move(set)};
}

inline void run_train_task(const RunConfig& cfg, const fs::path& data_root, const fs::path& run) {
  const auto p = prepare(cfg, data_root);
  const auto res = train_stage1_task(p.set, cfg.train_config());
  std::vector<BevFeatureMap> maps;
  for (const auto& tf : p.set.frames) maps.push_back(tf.fused);
  const auto dir = run / "stage1";
  detail::ensure_dir(dir);
  detail::write_json(dir / "head.json", head_to_json(res.head));
  detail::write_json(dir / "anchor.json", {{"p_original", anchor_performance(p.set, res.head)},
                                   {"p_hard", mean_iou(res.head, maps, p.set)}});
  detail::write_log(dir / "log.jsonl", "task", res.history);
}

inline void run_train_cons(const RunConfig& cfg, const fs::path& data_root, const fs::path& run) {
  detail::require_file(run / "stage1" / "head.json", "train --stage task");
  const auto head = load_head(run / "stage1" / "head.json");
  const auto p = prepare(cfg, data_root);
  const auto res = train_stage2_consistency(p.set, head, cfg.train_config());
  const auto dir = run / "stage2";
  detail::ensure_dir(dir);
  detail::write_json(dir / "weights.json", weights_to_json(res.weights));
  detail::write_log(dir / "log.jsonl", "cons", res.history);
}

inline void run_train_joint(const RunConfig& cfg, const fs::path& data_root, const fs::path& run) {
  detail::require_file(run / "stage2" / "weights.json", "train --stage cons");
  const auto weights = load_weights(run / "stage2" / "weights.json");
  const auto head = load_head(run / "stage1" / "head.json");
  const double p_original = load_p_original(run);
  const auto p = prepare(cfg, data_root);
  const auto res = train_stage3_joint(p.set, weights, head, p_original, cfg.train_config());
  const auto dir = run / "stage3";
  detail::ensure_dir(dir);
  detail::write_json(dir / "weights.json", weights_to_json(res.weights));
  detail::write_json(dir / "head.json", head_to_json(res.head));
  detail::write_log(dir / "log.jsonl", "joint", res.history);
}

inline void run_train_finetune(const RunConfig& cfg, const fs::path& data_root, const fs::path& run) {
  detail::require_file(run / "stage3" / "weights.json", "train --stage joint");
  detail::require_file(run / "stage3" / "head.json", "train --stage joint");
  const auto weights = load_weights(run / "stage3" / "weights.json");
  const auto head = load_head(run / "stage3" / "head.json");
  const double p_original = load_p_original(run);
  const auto p = prepare(cfg, data_root);
  const auto tc = cfg.train_config();
  const auto res = train_stage4_finetune(p.set, p.data.frames, p.ctx, weights, head, tc.ratio, p_original, tc);
  const auto dir = run / "stage4";
  detail::ensure_dir(dir);
  detail::write_json(dir / "head.json", head_to_json(res.finetune.head));
  detail::write_json(dir / "summary.json", {{"ratio", tc.ratio},
                                    {"zero_fraction", res.zero_fraction},
                                    {"p_masked_before", res.finetune.p_masked_before},
                                    {"p_masked_after", res.finetune.p_masked_after},
                                    {"best_epoch", res.finetune.best_epoch}});
  detail::write_log(dir / "log.jsonl", "finetune", res.finetune.history);
}

// predict / prune / eval ----------------------------------------------------------

/// Per-scene masks from the trained predictor: top-k at `ratio` when given,
/// otherwise the threshold mask at theta (scores stored alongside).
inline void run_predict(const RunConfig& cfg, const fs::path& data_root, const fs::path& run,
                        std::optional<double> ratio) {
  detail::require_file(run / "stage3" / "weights.json", "train --stage joint");
  const auto weights = load_weights(run / "stage3" / "weights.json");
  const Dataset d = load_dataset(data_root, cfg);
  const Context ctx = cfg.context();
  const PredictorGeometry geo = predictor_geometry(ctx);
  const auto dir = run / "masks";
  detail::ensure_dir(dir);
  parallel_for(d.frames.size(), cfg.jobs, [&](std::size_t i) {
    const auto scores = score_cells(weights, cell_features(d.frames[i], ctx, geo));
    const MaskGrid mask =
        ratio ? top_k_mask(ctx.mask_dims(), scores, *ratio) : threshold_mask(ctx.mask_dims(), scores, weights.theta);
    write_mask(dir / (d.dirs[i].filename().string() + ".mjpm"), mask, !ratio);
  });
}

inline std::vector<MaskGrid> load_masks(const Dataset& d, const fs::path& run, const Context& ctx) {
  std::vector<MaskGrid> masks;
  for (const auto& dir : d.dirs) {
    const auto path = run / "masks" / (dir.filename().string() + ".mjpm");
    detail::require_file(path, "predict");
    masks.push_back(read_mask(path).mask);
    require_compatible(masks.back(), ctx.bm);
  }
  return masks;
}

inline void run_prune(const RunConfig& cfg, const fs::path& data_root, const fs::path& run) {
  const Dataset d = load_dataset(data_root, cfg);
  const Context ctx = cfg.context();
  const auto masks = load_masks(d, run, ctx);
  parallel_for(d.frames.size(), cfg.jobs, [&](std::size_t i) {
    const PruneOutcome po = prune_frame(d.frames[i], masks[i], ctx);
    write_pruned_frame(po, d.frames[i], masks[i], run / "pruned" / d.dirs[i].filename());
  });
}

/// Evaluates the finetuned head on inputs pruned by the predicted masks.
inline nlohmann::json run_eval(const RunConfig& cfg, const fs::path& data_root, const fs::path& run) {
  detail::require_file(run / "stage4" / "head.json", "train --stage finetune");
  const auto head = load_head(run / "stage4" / "head.json");
  const auto p = prepare(cfg, data_root);
  const auto masks = load_masks(p.data, run, p.ctx);
  const CostModel model = CostModel::for_context(p.ctx);
  std::vector<OpCounter> counters, full_counters;
  const auto maps = pruned_features(p.data.frames, p.ctx, masks, cfg.jobs, &counters);
  const std::vector<MaskGrid> full(masks.size(), MaskGrid::all(p.ctx.mask_dims(), true));
  const auto full_maps = pruned_features(p.data.frames, p.ctx, full, cfg.jobs, &full_counters);
  double cost = 0.0, full_cost = 0.0, zf = 0.0;
  const double inv = 1.0 / static_cast<double>(masks.size());
  for (std::size_t i = 0; i < masks.size(); ++i) {
    cost += inv * static_cast<double>(model.cost(counters[i]));
    full_cost += inv * static_cast<double>(model.cost(full_counters[i]));
    zf += inv * masks[i].zero_fraction();
  }
  nlohmann::json out = {{"scenes", masks.size()},
                        {"mean_p_masked", mean_iou(head, maps, p.set)},
                        {"mean_p_unpruned", mean_iou(head, full_maps, p.set)},
                        {"mean_cost", cost},
                        {"unpruned_cost", full_cost},
                        {"cost_reduction", full_cost > 0.0 ? 1.0 - cost / full_cost : 0.0},
                        {"zero_fraction", zf}};
  detail::write_json(run / "eval.json", out);
  return out;
}

// bench / viz ---------------------------------------------------------------------

inline SweepReport run_bench(const RunConfig& cfg, const fs::path& data_root, const fs::path& run) {
  detail::require_file(run / "stage3" / "weights.json", "train --stage joint");
  detail::require_file(run / "stage3" / "head.json", "train --stage joint");
  const auto weights = load_weights(run / "stage3" / "weights.json");
  const auto head = load_head(run / "stage3" / "head.json");
  const double p_original = load_p_original(run);
  const auto p = prepare(cfg, data_root);
  const auto rep = run_sweep(p.data.frames, p.ctx, p.set, weights, head, p_original, cfg.sweep_config());
  const auto dir = run / "bench";
  detail::ensure_dir(dir);
  detail::write_json(dir / "report.json", report_to_json(rep));
  detail::write_json(dir / "timing.json", timing_to_json(rep));
  return rep;
}

inline void run_viz(const fs::path& report, const fs::path& out_dir) {
  detail::require_file(report, "bench");
  plot_report(detail::read_json(report), out_dir);
}

}  // namespace mjp
