#pragma once

// Pruning-index predictor: a logistic scorer over per-cell features derived
// from the front camera image and the cell geometry, plus the four-stage
// training protocol (task -> consistency -> joint -> finetune).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mjp/features.hpp"
#include "mjp/losses.hpp"
#include "mjp/parallel.hpp"
#include "mjp/pruning.hpp"
#include "mjp/taskproxy.hpp"

namespace mjp {

inline constexpr int kCellFeatureCount = 7;
inline constexpr int kFeatureVersion = 1;

namespace cell_feature {
inline constexpr int bias = 0;
inline constexpr int range = 1;          // planar distance of the cell center / half grid diagonal, [0,1]
inline constexpr int height = 2;         // cell center z relative to grid middle / half z extent, [-1,1]
inline constexpr int in_view = 3;        // cell center projects into the front image, {0,1}
inline constexpr int luminance = 4;      // containing patch mean luminance, [0,1]
inline constexpr int gradient = 5;       // containing patch gradient energy, [0,1]
inline constexpr int footprint = 6;      // distinct patches lifting into the cell / max over cells, [0,1]
}  // namespace cell_feature

using CellFeatureRow = std::array<double, kCellFeatureCount>;

struct CellFeatures {
  std::vector<CellFeatureRow> rows;  // one per mask cell, mask flattening order
  std::size_t size() const { return rows.size(); }
};

/// Calibration-only part of the cell features, shared by every frame.
struct PredictorGeometry {
  std::vector<double> range;
  std::vector<double> height;
  std::vector<int> patch;  // patch hit by the projected cell center, -1 when out of view
  std::vector<double> footprint;
};

inline PredictorGeometry predictor_geometry(const Context& ctx) {
  const Dims3& md = ctx.mask_dims();
  const std::size_t n = md.count();
  PredictorGeometry g{std::vector<double>(n), std::vector<double>(n), std::vector<int>(n, -1), std::vector<double>(n, 0.0)};
  const Vec3& lo = ctx.spec.min_corner();
  const Vec3& hi = ctx.spec.max_corner();
  const Vec3 cell(ctx.spec.voxel_size().x() * ctx.bm.block().x, ctx.spec.voxel_size().y() * ctx.bm.block().y,
                  ctx.spec.voxel_size().z() * ctx.bm.block().z);
  const double half_diag = 0.5 * std::hypot(hi.x() - lo.x(), hi.y() - lo.y());
  const double z_mid = 0.5 * (lo.z() + hi.z());
  const double z_half = 0.5 * (hi.z() - lo.z());

  std::vector<std::vector<int>> patches_per_cell(n);
  for (std::size_t id = 0; id < ctx.fp.patches.size(); ++id) {
    std::vector<std::size_t> blocks;
    for (const auto& e : ctx.fp.patches[id]) blocks.push_back(block_of(ctx.bm, unflatten(ctx.bm.voxel_dims(), e.voxel)));
    std::sort(blocks.begin(), blocks.end());
    blocks.erase(std::unique(blocks.begin(), blocks.end()), blocks.end());
    for (auto b : blocks) patches_per_cell[b].push_back(static_cast<int>(id));
  }
  std::size_t max_patches = 0;
  for (const auto& l : patches_per_cell) max_patches = std::max(max_patches, l.size());

  for (std::size_t j = 0; j < n; ++j) {
    const Index3 c = unflatten(md, j);
    const Vec3 center(lo.x() + (c.x + 0.5) * cell.x(), lo.y() + (c.y + 0.5) * cell.y(), lo.z() + (c.z + 0.5) * cell.z());
    g.range[j] = std::min(1.0, std::hypot(center.x(), center.y()) / half_diag);
    g.height[j] = (center.z() - z_mid) / z_half;
    if (auto px = project(ctx.cam, center)) g.patch[j] = ctx.pg.patch_at(px->u, px->v);
    g.footprint[j] = max_patches == 0 ? 0.0 : static_cast<double>(patches_per_cell[j].size()) / max_patches;
  }
  return g;
}

inline CellFeatures cell_features(const SceneFrame& frame, const Context& ctx, const PredictorGeometry& geo) {
  ctx.check_frame(frame);
  const auto desc = describe_patches(frame.image, ctx.pg);
  CellFeatures f;
  f.rows.resize(geo.range.size());
  for (std::size_t j = 0; j < f.rows.size(); ++j) {
    auto& r = f.rows[j];
    r[cell_feature::bias] = 1.0;
    r[cell_feature::range] = geo.range[j];
    r[cell_feature::height] = geo.height[j];
    if (geo.patch[j] >= 0) {
      r[cell_feature::in_view] = 1.0;
      r[cell_feature::luminance] = desc[geo.patch[j]].luminance;
      r[cell_feature::gradient] = desc[geo.patch[j]].gradient;
    } else {
      r[cell_feature::in_view] = 0.0;
      r[cell_feature::luminance] = 0.0;
      r[cell_feature::gradient] = 0.0;
    }
    r[cell_feature::footprint] = geo.footprint[j];
  }
  return f;
}

inline CellFeatures cell_features(const SceneFrame& frame, const Context& ctx) {
  return cell_features(frame, ctx, predictor_geometry(ctx));
}

// ---------------------------------------------------------------------------

struct PredictorWeights {
  std::array<double, kCellFeatureCount> w{};
  double theta = 0.5;

  bool finite() const {
    return std::all_of(w.begin(), w.end(), [](double v) { return std::isfinite(v); });
  }
};

inline nlohmann::json weights_to_json(const PredictorWeights& p) {
  return {{"w", std::vector<double>(p.w.begin(), p.w.end())}, {"theta", p.theta}, {"feature_version", kFeatureVersion}};
}

inline PredictorWeights weights_from_json(const nlohmann::json& j) {
  const auto w = j.at("w").get<std::vector<double>>();
  if (w.size() != kCellFeatureCount) throw std::invalid_argument("weights: expected 7 values in 'w'");
  if (j.at("feature_version").get<int>() != kFeatureVersion) throw std::invalid_argument("weights: unsupported feature_version");
  PredictorWeights p;
  std::copy(w.begin(), w.end(), p.w.begin());
  p.theta = j.at("theta").get<double>();
  if (!(p.theta > 0.0 && p.theta < 1.0)) throw std::invalid_argument("weights: theta outside (0,1)");
  return p;
}

inline double score_cell(const PredictorWeights& p, const CellFeatureRow& f) {
  double z = 0.0;
  for (int k = 0; k < kCellFeatureCount; ++k) z += p.w[k] * f[k];
  return sigmoid(z);
}

inline std::vector<double> score_cells(const PredictorWeights& p, const CellFeatures& feats) {
  std::vector<double> s(feats.size());
  for (std::size_t j = 0; j < s.size(); ++j) s[j] = score_cell(p, feats.rows[j]);
  return s;
}

/// d s_j / d w = s_j (1 - s_j) f_j.
inline CellFeatureRow score_gradient(const PredictorWeights& p, const CellFeatureRow& f) {
  const double s = score_cell(p, f);
  CellFeatureRow g{};
  for (int k = 0; k < kCellFeatureCount; ++k) g[k] = s * (1.0 - s) * f[k];
  return g;
}

/// Thresholded mask carrying the scores (bit = s >= theta).
inline MaskGrid threshold_mask(const Dims3& dims, std::span<const double> scores, double theta) {
  std::vector<float> s(scores.begin(), scores.end());
  return MaskGrid(dims, std::move(s), static_cast<float>(theta));
}

/// Drops the round(r * N) lowest-scoring cells; among equal scores the lower
/// flattened index is kept.
inline MaskGrid top_k_mask(const Dims3& dims, std::span<const double> scores, double ratio) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw std::invalid_argument("top_k_mask: ratio outside [0,1]");
  if (scores.size() != dims.count()) throw DimensionError("top_k_mask: score count does not match dims");
  const std::size_t n = scores.size();
  const auto zeros = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) { return scores[a] > scores[b]; });
  std::vector<std::uint8_t> bits(n, 0);
  for (std::size_t r = 0; r < n - zeros; ++r) bits[order[r]] = 1;
  return MaskGrid::from_bits(dims, bits);
}

/// Weights for the differentiable relaxation: each cell's inputs are scaled by its score.
inline std::vector<double> soft_prune_weights(std::span<const double> scores) {
  return {scores.begin(), scores.end()};
}

// ---------------------------------------------------------------------------

enum class SparsityMode {
  soft,              // sparsity loss on the scores s
  straight_through,  // value on the hard mask [s >= theta], gradient taken as if on s
};

inline std::string to_string(SparsityMode m) { return m == SparsityMode::soft ? "soft" : "straight_through"; }

inline SparsityMode sparsity_mode_from_string(const std::string& s) {
  if (s == "soft") return SparsityMode::soft;
  if (s == "straight_through") return SparsityMode::straight_through;
  throw std::invalid_argument("unknown sparsity mode '" + s + "'");
}

struct TrainConfig {
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 1.0;
  double lambda = 1.0;
  double ratio = 0.5;
  double theta = 0.5;
  double learning_rate = 0.1;       // predictor weights
  double head_learning_rate = 4.0;  // task head (whitened inputs)
  int epochs = 200;
  std::uint64_t seed = 42;
  int jobs = 1;
  SparsityMode sparsity = SparsityMode::straight_through;

  void validate() const {
    if (!(alpha >= 0.0 && beta >= 0.0 && gamma >= 0.0 && lambda >= 0.0))
      throw std::invalid_argument("TrainConfig: loss weights must be >= 0");
    if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("TrainConfig: ratio must be in (0,1)");
    if (!(theta > 0.0 && theta < 1.0)) throw std::invalid_argument("TrainConfig: theta must be in (0,1)");
    if (!(learning_rate > 0.0) || !(head_learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning rate must be positive");
    if (epochs < 0) throw std::invalid_argument("TrainConfig: epochs must be >= 0");
  }

  LossWeights weights() const { return {alpha, beta, gamma}; }
};

/// Per-frame quantities that stay fixed during predictor training.
struct TrainingFrame {
  CellFeatures feats;
  BevFeatureMap stacked;  // original features before smoothing
  BevFeatureMap fused;    // original features after smoothing
  std::vector<double> lidar_counts;  // points per mask cell
  OccupancyTruth truth;
};

struct TrainingSet {
  std::vector<TrainingFrame> frames;
  std::vector<double> camera_counts;  // footprint entries per mask cell (calibration-only)
  Dims3 mask_dims;
  int lidar_channels = channel::lidar_count;

  std::size_t cells() const { return mask_dims.count(); }
};

inline TrainingSet prepare_training_set(std::span<const SceneFrame> frames, const Context& ctx, int jobs = 1) {
  TrainingSet set;
  set.mask_dims = ctx.mask_dims();
  set.camera_counts.assign(ctx.cells(), 0.0);
  for (const auto& entries : ctx.fp.patches)
    for (const auto& e : entries) set.camera_counts[block_of(ctx.bm, unflatten(ctx.bm.voxel_dims(), e.voxel))] += 1.0;
  const PredictorGeometry geo = predictor_geometry(ctx);
  set.frames.resize(frames.size());
  parallel_for(frames.size(), jobs, [&](std::size_t i) {
    const auto& frame = frames[i];
    auto& tf = set.frames[i];
    tf.feats = cell_features(frame, ctx, geo);
    FrameBev bev = extract_frame_bev(frame, ctx);
    tf.stacked = std::move(bev.stacked);
    tf.fused = std::move(bev.fused);
    tf.lidar_counts.assign(ctx.cells(), 0.0);
    for (auto b : point_blocks(ctx.spec, ctx.bm, frame.points))
      if (b >= 0) tf.lidar_counts[static_cast<std::size_t>(b)] += 1.0;
    tf.truth = occupancy_truth(ctx.spec, ctx.bm, frame.boxes);
  });
  return set;
}

/// Soft-pruned features before smoothing. Each column's LiDAR (camera) channels
/// are scaled by the count-weighted mean score of its cells, i.e. the expected
/// fraction of that column's LiDAR (camera) inputs that survive.
inline BevFeatureMap soft_stacked(const TrainingSet& set, const TrainingFrame& tf, std::span<const double> weights) {
  const int nz = set.mask_dims.z;
  BevFeatureMap out(tf.stacked.width(), tf.stacked.height(), tf.stacked.channels());
  for (std::size_t col = 0; col < out.columns(); ++col) {
    double kl = 0.0, nl = 0.0, kc = 0.0, nc = 0.0;
    for (int k = 0; k < nz; ++k) {
      const std::size_t j = col * nz + k;
      kl += weights[j] * tf.lidar_counts[j];
      nl += tf.lidar_counts[j];
      kc += weights[j] * set.camera_counts[j];
      nc += set.camera_counts[j];
    }
    const double rl = nl > 0.0 ? kl / nl : 0.0;
    const double rc = nc > 0.0 ? kc / nc : 0.0;
    for (int c = 0; c < out.channels(); ++c)
      out.at(col, c) = (c < set.lidar_channels ? rl : rc) * tf.stacked.at(col, c);
  }
  return out;
}

// Objective ---------------------------------------------------------------------

struct ObjectiveTerms {
  double task_weight = 1.0;
  LossWeights weights;
  double lambda = 1.0;
  double ratio = 0.5;
  double theta = 0.5;
  double p_original = 0.0;  // anchor soft IoU
  SparsityMode sparsity = SparsityMode::soft;
};

/// Hard mask bits for scores at threshold theta, with the same float comparison MaskGrid uses.
inline std::vector<double> hard_bits(std::span<const double> scores, double theta) {
  std::vector<double> m(scores.size());
  for (std::size_t j = 0; j < m.size(); ++j) m[j] = static_cast<float>(scores[j]) >= static_cast<float>(theta) ? 1.0 : 0.0;
  return m;
}

struct ObjectiveValue {
  LossBreakdown loss;
  double p_masked = 0.0;  // mean soft IoU on soft-pruned features
  std::array<double, kCellFeatureCount> grad_w{};
  std::vector<double> grad_head;
};

/// Dataset-mean objective over soft-pruned features, with analytic gradients
/// for both the predictor weights and the task head.
inline ObjectiveValue joint_objective(const TrainingSet& set, const PredictorWeights& pw, const TaskHead& head,
                                      const ObjectiveTerms& terms, bool want_gradient = true, int jobs = 1) {
  struct PerFrame {
    std::vector<double> scores;
    double task = 0.0, cons = 0.0, sparse = 0.0, soft_iou = 0.0;
    TaskGradient task_grad;
    BevFeatureMap cons_grad;
    SoftIouGradient iou_grad;
  };
  const std::size_t nf = set.frames.size();
  if (nf == 0) throw std::invalid_argument("joint_objective: empty training set");
  std::vector<PerFrame> per(nf);
  parallel_for(nf, jobs, [&](std::size_t f) {
    const auto& tf = set.frames[f];
    auto& pf = per[f];
    pf.scores = score_cells(pw, tf.feats);
    const BevFeatureMap soft = smooth_bev(soft_stacked(set, tf, soft_prune_weights(pf.scores)));
    pf.task_grad = task_loss_gradient(head, soft, tf.truth, want_gradient);
    pf.task = pf.task_grad.loss;
    pf.cons = consistency_loss(tf.fused, soft);
    pf.sparse = terms.sparsity == SparsityMode::soft ? sparsity_loss(pf.scores, terms.ratio)
                                                     : sparsity_loss(hard_bits(pf.scores, terms.theta), terms.ratio);
    pf.iou_grad = soft_performance_gradient(head, soft, tf.truth, want_gradient);
    pf.soft_iou = pf.iou_grad.value;
    if (want_gradient) pf.cons_grad = consistency_gradient(tf.fused, soft);
  });

  ObjectiveValue out;
  double task = 0.0, cons = 0.0, sparse = 0.0, iou_sum = 0.0;
  for (const auto& pf : per) {
    task += pf.task;
    cons += pf.cons;
    sparse += pf.sparse;
    iou_sum += pf.soft_iou;
  }
  const double inv = 1.0 / static_cast<double>(nf);
  out.p_masked = iou_sum * inv;
  const double penalty = penalty_loss(terms.p_original, out.p_masked, terms.lambda);
  const bool penalty_active = terms.p_original > out.p_masked;
  out.loss = total_loss(task * inv, cons * inv, sparse * inv, penalty, terms.weights);
  out.loss.total += (terms.task_weight - 1.0) * out.loss.task;
  if (!want_gradient) return out;

  const double pen_scale = penalty_active ? terms.weights.gamma * terms.lambda : 0.0;
  out.grad_head.assign(head.parameter_count(), 0.0);
  std::vector<std::array<double, kCellFeatureCount>> grad_w(nf);
  parallel_for(nf, jobs, [&](std::size_t f) {
    const auto& tf = set.frames[f];
    const auto& pf = per[f];
    // d total / d fused soft features
    BevFeatureMap g(tf.fused.width(), tf.fused.height(), tf.fused.channels());
    auto gv = g.values();
    const auto tg = pf.task_grad.features.values();
    const auto cg = pf.cons_grad.values();
    const auto ig = pf.iou_grad.features.values();
    for (std::size_t i = 0; i < gv.size(); ++i)
      gv[i] = inv * (terms.task_weight * tg[i] + terms.weights.alpha * cg[i] - pen_scale * ig[i]);
    const BevFeatureMap gs = smooth_bev(g);  // adjoint of the symmetric smoothing

    const int nz = set.mask_dims.z;
    const double sparse_ds =
        inv * terms.weights.beta *
        (terms.sparsity == SparsityMode::soft ? sparsity_gradient(pf.scores, terms.ratio)
                                              : sparsity_gradient(hard_bits(pf.scores, terms.theta), terms.ratio));
    auto& gw = grad_w[f];
    gw.fill(0.0);
    for (std::size_t col = 0; col < gs.columns(); ++col) {
      double d_rl = 0.0, d_rc = 0.0;
      for (int c = 0; c < gs.channels(); ++c) {
        const double v = gs.at(col, c) * tf.stacked.at(col, c);
        (c < set.lidar_channels ? d_rl : d_rc) += v;
      }
      double nl = 0.0, nc = 0.0;
      for (int k = 0; k < nz; ++k) {
        nl += tf.lidar_counts[col * nz + k];
        nc += set.camera_counts[col * nz + k];
      }
      for (int k = 0; k < nz; ++k) {
        const std::size_t j = col * nz + k;
        double ds = sparse_ds;
        if (nl > 0.0) ds += d_rl * tf.lidar_counts[j] / nl;
        if (nc > 0.0) ds += d_rc * set.camera_counts[j] / nc;
        const double s = pf.scores[j];
        const double dz = ds * s * (1.0 - s);
        const auto& fr = tf.feats.rows[j];
        for (int q = 0; q < kCellFeatureCount; ++q) gw[q] += dz * fr[q];
      }
    }
  });
  for (std::size_t f = 0; f < nf; ++f) {
    for (int q = 0; q < kCellFeatureCount; ++q) out.grad_w[q] += grad_w[f][q];
    for (std::size_t k = 0; k < out.grad_head.size(); ++k)
      out.grad_head[k] += inv * (terms.task_weight * per[f].task_grad.head[k] - pen_scale * per[f].iou_grad.head[k]);
  }
  return out;
}

// Training stages ---------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;
  LossBreakdown loss;
  double p_masked = 0.0;  // soft IoU
  double p_hard = 0.0;    // hard IoU (finetuning only)
  double zero_fraction = 0.0;
};

inline nlohmann::json epoch_to_json(const std::string& stage, const EpochRecord& r) {
  return {{"stage", stage},       {"epoch", r.epoch},         {"task", r.loss.task},
          {"cons", r.loss.cons},  {"sparse", r.loss.sparse},  {"penalty", r.loss.penalty},
          {"total", r.loss.total}, {"p_masked", r.p_masked}, {"p_hard", r.p_hard},
          {"zero_fraction", r.zero_fraction}};
}

namespace detail {
inline void check_finite(const LossBreakdown& l, const std::string& stage, int epoch) {
  if (!std::isfinite(l.total) || !std::isfinite(l.task) || !std::isfinite(l.cons) || !std::isfinite(l.sparse) ||
      !std::isfinite(l.penalty))
    throw DivergenceError(stage + ": non-finite loss at epoch " + std::to_string(epoch));
}
}  // namespace detail

struct Stage1Result {
  TaskHead head;
  std::vector<EpochRecord> history;  // epochs + 1 records, the last after the final update
};

/// Task head on unpruned features, full-batch gradient descent on the mean task loss.
inline Stage1Result train_stage1_task(const TrainingSet& set, const TrainConfig& cfg,
                                      std::optional<TaskHead> init = std::nullopt) {
  cfg.validate();
  if (set.frames.empty()) throw std::invalid_argument("train_stage1_task: empty dataset");
  std::vector<BevFeatureMap> maps;
  if (!init)
    for (const auto& tf : set.frames) maps.push_back(tf.fused);
  Stage1Result res{init ? *init : whiten_head(maps), {}};
  const double inv = 1.0 / static_cast<double>(set.frames.size());
  std::vector<TaskGradient> per(set.frames.size());
  for (int epoch = 0; epoch <= cfg.epochs; ++epoch) {
    parallel_for(set.frames.size(), cfg.jobs, [&](std::size_t f) {
      per[f] = task_loss_gradient(res.head, set.frames[f].fused, set.frames[f].truth);
    });
    EpochRecord rec;
    rec.epoch = epoch;
    std::vector<double> grad(res.head.parameter_count(), 0.0);
    for (const auto& g : per) {
      rec.loss.task += inv * g.loss;
      for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += inv * g.head[k];
    }
    rec.loss.total = rec.loss.task;
    detail::check_finite(rec.loss, "stage1", epoch);
    res.history.push_back(rec);
    if (epoch == cfg.epochs) break;
    auto p = res.head.flat();
    for (std::size_t k = 0; k < p.size(); ++k) p[k] -= cfg.head_learning_rate * grad[k];
    res.head = res.head.with_flat(p);
    if (!res.head.finite()) throw DivergenceError("stage1: non-finite head parameters");
  }
  return res;
}

/// Mean soft IoU of `head` over the unpruned features.
inline double anchor_performance(const TrainingSet& set, const TaskHead& head) {
  double sum = 0.0;
  for (const auto& tf : set.frames) sum += soft_performance(head, tf.fused, tf.truth);
  return sum / static_cast<double>(set.frames.size());
}

struct PredictorResult {
  PredictorWeights weights;
  TaskHead head;
  std::vector<EpochRecord> history;
};

namespace detail {

inline double mean_zero_fraction(const TrainingSet& set, const PredictorWeights& pw) {
  double sum = 0.0;
  for (const auto& tf : set.frames) {
    const auto s = score_cells(pw, tf.feats);
    std::size_t zeros = 0;
    for (double v : s) zeros += static_cast<float>(v) >= static_cast<float>(pw.theta) ? 0 : 1;
    sum += static_cast<double>(zeros) / static_cast<double>(s.size());
  }
  return sum / static_cast<double>(set.frames.size());
}

inline PredictorResult descend(const TrainingSet& set, PredictorResult state, const ObjectiveTerms& terms,
                               const TrainConfig& cfg, bool train_head, const std::string& stage) {
  for (int epoch = 0; epoch <= cfg.epochs; ++epoch) {
    const ObjectiveValue v = joint_objective(set, state.weights, state.head, terms, epoch < cfg.epochs, cfg.jobs);
    check_finite(v.loss, stage, epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = v.loss;
    rec.p_masked = v.p_masked;
    rec.zero_fraction = mean_zero_fraction(set, state.weights);
    state.history.push_back(rec);
    if (epoch == cfg.epochs) break;
    for (int q = 0; q < kCellFeatureCount; ++q) state.weights.w[q] -= cfg.learning_rate * v.grad_w[q];
    if (train_head) {
      auto p = state.head.flat();
      for (std::size_t k = 0; k < p.size(); ++k) p[k] -= cfg.head_learning_rate * v.grad_head[k];
      state.head = state.head.with_flat(p);
    }
    if (!state.weights.finite() || !state.head.finite())
      throw DivergenceError(stage + ": non-finite parameters at epoch " + std::to_string(epoch));
  }
  return state;
}

}  // namespace detail

/// Predictor only, consistency loss only; backbone and task head frozen.
inline PredictorResult train_stage2_consistency(const TrainingSet& set, const TaskHead& frozen_head,
                                                const TrainConfig& cfg,
                                                std::optional<PredictorWeights> init = std::nullopt) {
  cfg.validate();
  if (set.frames.empty()) throw std::invalid_argument("train_stage2_consistency: empty dataset");
  PredictorWeights w = init.value_or(PredictorWeights{});
  w.theta = cfg.theta;
  ObjectiveTerms terms;
  terms.task_weight = 0.0;
  terms.weights = {1.0, 0.0, 0.0};
  terms.ratio = cfg.ratio;
  return detail::descend(set, {w, frozen_head, {}}, terms, cfg, false, "stage2");
}

/// Predictor and task head together on the full objective.
inline PredictorResult train_stage3_joint(const TrainingSet& set, const PredictorWeights& predictor,
                                          const TaskHead& head, double p_original, const TrainConfig& cfg) {
  cfg.validate();
  if (set.frames.empty()) throw std::invalid_argument("train_stage3_joint: empty dataset");
  ObjectiveTerms terms;
  terms.task_weight = 1.0;
  terms.weights = cfg.weights();
  terms.lambda = cfg.lambda;
  terms.ratio = cfg.ratio;
  terms.theta = cfg.theta;
  terms.p_original = p_original;
  terms.sparsity = cfg.sparsity;
  PredictorWeights w = predictor;
  w.theta = cfg.theta;
  return detail::descend(set, {w, head, {}}, terms, cfg, true, "stage3");
}

// Stage 4 -----------------------------------------------------------------------

/// Fused features of every frame after hard pruning with `masks`.
inline std::vector<BevFeatureMap> pruned_features(std::span<const SceneFrame> frames, const Context& ctx,
                                                  std::span<const MaskGrid> masks, int jobs = 1,
                                                  std::vector<OpCounter>* counters = nullptr) {
  std::vector<BevFeatureMap> out(frames.size());
  if (counters) counters->assign(frames.size(), {});
  parallel_for(frames.size(), jobs, [&](std::size_t i) {
    out[i] = extract_frame_bev(frames[i], ctx, &masks[i], counters ? &(*counters)[i] : nullptr).fused;
  });
  return out;
}

inline std::vector<MaskGrid> predictor_masks(const TrainingSet& set, const PredictorWeights& pw, double ratio) {
  std::vector<MaskGrid> masks;
  masks.reserve(set.frames.size());
  for (const auto& tf : set.frames) masks.push_back(top_k_mask(set.mask_dims, score_cells(pw, tf.feats), ratio));
  return masks;
}

inline double mean_iou(const TaskHead& head, std::span<const BevFeatureMap> maps, const TrainingSet& set) {
  double sum = 0.0;
  for (std::size_t f = 0; f < maps.size(); ++f) sum += performance(head, maps[f], set.frames[f].truth);
  return sum / static_cast<double>(maps.size());
}

struct FinetuneResult {
  TaskHead head;
  std::vector<EpochRecord> history;
  double p_masked_before = 0.0;  // hard IoU, head before finetuning
  double p_masked_after = 0.0;
  int best_epoch = 0;
};

/// Task head finetuning on fixed, hard-pruned features with
/// task + gamma * lambda * max(0, P_original - softIoU). The returned head is
/// the checkpoint with the highest hard IoU (earliest on ties), so finetuning
/// never lowers P_masked on the data it sees.
inline FinetuneResult finetune_head(const TrainingSet& set, std::span<const BevFeatureMap> maps, const TaskHead& head,
                                    double p_original, const TrainConfig& cfg) {
  if (maps.size() != set.frames.size()) throw DimensionError("finetune_head: one map per frame required");
  const std::size_t nf = maps.size();
  const double inv = 1.0 / static_cast<double>(nf);
  FinetuneResult res{head, {}, mean_iou(head, maps, set), 0.0, 0};
  res.p_masked_after = res.p_masked_before;
  TaskHead current = head;
  std::vector<TaskGradient> tg(nf);
  std::vector<SoftIouGradient> ig(nf);
  for (int epoch = 0; epoch <= cfg.epochs; ++epoch) {
    parallel_for(nf, cfg.jobs, [&](std::size_t f) {
      tg[f] = task_loss_gradient(current, maps[f], set.frames[f].truth);
      ig[f] = soft_performance_gradient(current, maps[f], set.frames[f].truth);
    });
    EpochRecord rec;
    rec.epoch = epoch;
    double p_soft = 0.0;
    for (std::size_t f = 0; f < nf; ++f) {
      rec.loss.task += inv * tg[f].loss;
      p_soft += inv * ig[f].value;
    }
    rec.p_masked = p_soft;
    rec.loss.penalty = penalty_loss(p_original, p_soft, cfg.lambda);
    rec.loss.total = rec.loss.task + cfg.gamma * rec.loss.penalty;
    rec.p_hard = mean_iou(current, maps, set);
    detail::check_finite(rec.loss, "stage4", epoch);
    res.history.push_back(rec);
    if (rec.p_hard > res.p_masked_after) {
      res.p_masked_after = rec.p_hard;
      res.head = current;
      res.best_epoch = epoch;
    }
    if (epoch == cfg.epochs) break;
    const double pen_scale = p_original > p_soft ? cfg.gamma * cfg.lambda : 0.0;
    auto p = current.flat();
    for (std::size_t k = 0; k < p.size(); ++k) {
      double g = 0.0;
      for (std::size_t f = 0; f < nf; ++f) g += inv * (tg[f].head[k] - pen_scale * ig[f].head[k]);
      p[k] -= cfg.head_learning_rate * g;
    }
    current = current.with_flat(p);
    if (!current.finite()) throw DivergenceError("stage4: non-finite head parameters");
  }
  return res;
}

struct Stage4Result {
  FinetuneResult finetune;
  std::vector<MaskGrid> masks;
  double zero_fraction = 0.0;  // mean over frames
};

/// Fixes top-k masks at `ratio`, prunes the raw inputs and finetunes the head.
inline Stage4Result train_stage4_finetune(const TrainingSet& set, std::span<const SceneFrame> frames,
                                          const Context& ctx, const PredictorWeights& pw, const TaskHead& head,
                                          double ratio, double p_original, const TrainConfig& cfg) {
  if (frames.size() != set.frames.size()) throw DimensionError("train_stage4_finetune: frame count mismatch");
  Stage4Result res;
  res.masks = predictor_masks(set, pw, ratio);
  double zf = 0.0;
  for (const auto& m : res.masks) zf += m.zero_fraction();
  res.zero_fraction = zf / static_cast<double>(res.masks.size());
  const auto maps = pruned_features(frames, ctx, res.masks, cfg.jobs);
  res.finetune = finetune_head(set, maps, head, p_original, cfg);
  return res;
}

}  // namespace mjp
