#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace mjp;

namespace {

const Context& ctx() {
  static const Context c = test::desk_context();
  return c;
}

const std::vector<SceneFrame>& frames() {
  static const auto f = test::make_frames(4, 77);
  return f;
}

const TrainingSet& set() {
  static const TrainingSet s = prepare_training_set(frames(), ctx());
  return s;
}

const TaskHead& trained_head() {
  static const TaskHead h = [] {
    TrainConfig cfg;
    cfg.epochs = 60;
    return train_stage1_task(set(), cfg).head;
  }();
  return h;
}

std::size_t cell_index(int x, int y, int z) { return flatten({32, 32, 4}, {x, y, z}); }

}  // namespace

TEST(Predictor, CellFeatureRanges) {
  const auto f = cell_features(frames()[0], ctx());
  ASSERT_EQ(f.size(), 4096u);
  double max_fp = 0.0;
  for (const auto& r : f.rows) {
    EXPECT_EQ(r[cell_feature::bias], 1.0);
    EXPECT_GE(r[cell_feature::range], 0.0);
    EXPECT_LE(r[cell_feature::range], 1.0);
    EXPECT_GE(r[cell_feature::height], -1.0);
    EXPECT_LE(r[cell_feature::height], 1.0);
    EXPECT_TRUE(r[cell_feature::in_view] == 0.0 || r[cell_feature::in_view] == 1.0);
    for (int k : {cell_feature::luminance, cell_feature::gradient, cell_feature::footprint}) {
      EXPECT_GE(r[k], 0.0);
      EXPECT_LE(r[k], 1.0);
    }
    if (r[cell_feature::in_view] == 0.0) {
      EXPECT_EQ(r[cell_feature::luminance], 0.0);
      EXPECT_EQ(r[cell_feature::gradient], 0.0);
    }
    max_fp = std::max(max_fp, r[cell_feature::footprint]);
  }
  EXPECT_EQ(max_fp, 1.0);
}

TEST(Predictor, ViewFeatureFollowsCamera) {
  const auto f = cell_features(frames()[0], ctx());
  // Centers (5.2, 0.4, -0.5) in front of the camera and (-5.2, 0.4, -0.5) behind it.
  const auto& front = f.rows[cell_index(22, 16, 1)];
  const auto& back = f.rows[cell_index(9, 16, 1)];
  EXPECT_EQ(front[cell_feature::in_view], 1.0);
  EXPECT_EQ(back[cell_feature::in_view], 0.0);
  EXPECT_GT(front[cell_feature::footprint], 0.0);
  EXPECT_EQ(back[cell_feature::footprint], 0.0);
  EXPECT_NEAR(front[cell_feature::range], std::hypot(5.2, 0.4) / std::hypot(12.8, 12.8), 1e-12);
  EXPECT_NEAR(front[cell_feature::height], -0.25, 1e-12);
}

TEST(Predictor, ZeroWeightsScoreHalf) {
  const PredictorWeights w;
  const auto s = score_cells(w, set().frames[0].feats);
  for (double v : s) EXPECT_EQ(v, 0.5);
  const auto m = threshold_mask(set().mask_dims, s, 0.5);
  EXPECT_EQ(m.zero_fraction(), 0.0);
  PredictorWeights big;
  big.w[cell_feature::bias] = 10.0;
  for (double v : score_cells(big, set().frames[0].feats)) EXPECT_NEAR(v, 1.0, 1e-4);
}

TEST(Predictor, ScoreGradientFiniteDifference) {
  Rng rng(1);
  const auto& rows = set().frames[0].feats.rows;
  for (int point = 0; point < 5; ++point) {
    PredictorWeights w;
    for (auto& v : w.w) v = rng.normal();
    const auto& f = rows[rng.below(rows.size())];
    const auto g = score_gradient(w, f);
    for (int k = 0; k < kCellFeatureCount; ++k) {
      PredictorWeights up = w, down = w;
      up.w[k] += 1e-5;
      down.w[k] -= 1e-5;
      const double num = (score_cell(up, f) - score_cell(down, f)) / 2e-5;
      if (f[k] == 0.0)
        EXPECT_EQ(g[k], 0.0);
      else
        EXPECT_LT(test::rel_err(g[k], num), 1e-4);
    }
  }
}

TEST(Predictor, SoftPruneIdentityAndZero) {
  const auto& tf = set().frames[0];
  const std::vector<double> ones(set().cells(), 1.0), zeros(set().cells(), 0.0);
  EXPECT_EQ(soft_stacked(set(), tf, soft_prune_weights(ones)), tf.stacked);
  EXPECT_EQ(smooth_bev(soft_stacked(set(), tf, ones)), tf.fused);
  const auto pruned_all = soft_stacked(set(), tf, zeros);
  for (double v : pruned_all.values()) EXPECT_EQ(v, 0.0);
  const std::vector<double> third(set().cells(), 1.0 / 3.0);
  const auto t = soft_stacked(set(), tf, third);
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_NEAR(t.values()[i], tf.stacked.values()[i] / 3.0, 1e-12);
}

TEST(Predictor, SoftPruneMatchesHardOnBinaryColumns) {
  // With whole-column binary weights the relaxation equals the hard pruning.
  const auto& tf = set().frames[1];
  Rng rng(2);
  std::vector<double> w(set().cells());
  std::vector<std::uint8_t> bits(set().cells());
  for (std::size_t col = 0; col < 1024; ++col) {
    const std::uint8_t b = rng.uniform() < 0.5;
    for (int k = 0; k < 4; ++k) {
      w[col * 4 + k] = b;
      bits[col * 4 + k] = b;
    }
  }
  const auto mask = MaskGrid::from_bits(set().mask_dims, bits);
  const auto hard = extract_frame_bev(frames()[1], ctx(), &mask).stacked;
  const auto soft = soft_stacked(set(), tf, w);
  for (std::size_t i = 0; i < soft.size(); ++i) EXPECT_NEAR(soft.values()[i], hard.values()[i], 1e-12);
}

TEST(Predictor, TopKCountAndOrder) {
  Rng rng(3);
  const Dims3 d{8, 8, 4};
  std::vector<double> s(d.count());
  for (auto& v : s) v = rng.uniform();
  for (double r : {0.0, 0.1, 0.3, 0.5, 0.77, 1.0}) {
    const auto m = top_k_mask(d, s, r);
    const double zf = m.zero_fraction();
    EXPECT_LE(std::abs(zf - r), 0.5 / d.count() + 1e-15);
    double min_kept = 2.0, max_dropped = -1.0;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (m.kept(j))
        min_kept = std::min(min_kept, s[j]);
      else
        max_dropped = std::max(max_dropped, s[j]);
    }
    EXPECT_GE(min_kept, max_dropped);
  }
  EXPECT_THROW(top_k_mask(d, s, 1.5), std::invalid_argument);
  EXPECT_THROW(top_k_mask({2, 2, 2}, s, 0.5), DimensionError);
}

TEST(Predictor, TopKTieBreakKeepsLowerIndex) {
  const Dims3 d{4, 1, 2};
  const std::vector<double> s(8, 0.3);
  const auto m = top_k_mask(d, s, 0.25);
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(m.kept(j), j < 6);
}

TEST(Predictor, WeightsJsonRoundTrip) {
  PredictorWeights w;
  for (int k = 0; k < kCellFeatureCount; ++k) w.w[k] = 0.1 * k - 0.3;
  w.theta = 0.4;
  const auto back = weights_from_json(weights_to_json(w));
  EXPECT_EQ(back.w, w.w);
  EXPECT_EQ(back.theta, 0.4);
  auto bad = weights_to_json(w);
  bad["w"].erase(0);
  EXPECT_THROW(weights_from_json(bad), std::invalid_argument);
}

TEST(Predictor, Stage1SeparableToyReachesHighIou) {
  TrainingSet toy;
  toy.mask_dims = {8, 8, 1};
  Rng rng(4);
  for (int f = 0; f < 6; ++f) {
    TrainingFrame tf;
    tf.truth = {8, 8, std::vector<std::uint8_t>(64)};
    tf.fused = BevFeatureMap(8, 8, 3);
    for (std::size_t col = 0; col < 64; ++col) {
      const bool occ = rng.uniform() < 0.3;
      tf.truth.occupied[col] = occ;
      tf.fused.at(col, 0) = (occ ? 2.0 : 0.5) + 0.2 * rng.normal();
      tf.fused.at(col, 1) = rng.normal();
      tf.fused.at(col, 2) = 5.0 + 3.0 * rng.normal();
    }
    toy.frames.push_back(std::move(tf));
  }
  TrainConfig cfg;
  cfg.epochs = 200;
  const auto r = train_stage1_task(toy, cfg);
  ASSERT_EQ(r.history.size(), 201u);
  EXPECT_LT(r.history.back().loss.task, r.history.front().loss.task);
  double sum = 0.0;
  for (const auto& tf : toy.frames) sum += performance(r.head, tf.fused, tf.truth);
  EXPECT_GE(sum / toy.frames.size(), 0.95);
}

TEST(Predictor, Stage1ZeroEpochsReturnsInit) {
  TrainConfig cfg;
  cfg.epochs = 0;
  const auto r = train_stage1_task(set(), cfg, trained_head());
  EXPECT_EQ(r.head.flat(), trained_head().flat());
  EXPECT_EQ(r.history.size(), 1u);
}

TEST(Predictor, Stage1LossDecreases) {
  TrainConfig cfg;
  cfg.epochs = 30;
  const auto r = train_stage1_task(set(), cfg);
  EXPECT_NEAR(r.history.front().loss.task, std::log(2.0), 1e-12);
  EXPECT_LT(r.history.back().loss.task, r.history.front().loss.task);
}

TEST(Predictor, Stage2BiasInitIsConsistent) {
  TrainConfig cfg;
  cfg.epochs = 0;
  PredictorWeights init;
  init.w[cell_feature::bias] = 10.0;
  const auto r = train_stage2_consistency(set(), trained_head(), cfg, init);
  EXPECT_LT(r.history.front().loss.cons, 1e-6);
}

TEST(Predictor, Stage2ReducesConsistency) {
  TrainConfig cfg;
  cfg.epochs = 20;
  const auto r = train_stage2_consistency(set(), trained_head(), cfg);
  EXPECT_LT(r.history.back().loss.cons, r.history.front().loss.cons);
  EXPECT_EQ(r.history.front().loss.task, r.history.front().loss.task);  // finite
  EXPECT_EQ(r.head.flat(), trained_head().flat());
}

namespace {

void check_objective_gradient(const ObjectiveTerms& terms, std::uint64_t seed) {
  Rng rng(seed);
  for (int point = 0; point < 5; ++point) {
    PredictorWeights w;
    for (auto& v : w.w) v = 0.5 * rng.normal();
    TaskHead head = trained_head();
    for (auto& v : head.weights) v += 0.1 * rng.normal();
    const auto v = joint_objective(set(), w, head, terms);
    for (int q = 0; q < kCellFeatureCount; ++q) {
      PredictorWeights up = w, down = w;
      up.w[q] += 1e-5;
      down.w[q] -= 1e-5;
      const double num = (joint_objective(set(), up, head, terms, false).loss.total -
                          joint_objective(set(), down, head, terms, false).loss.total) / 2e-5;
      EXPECT_LT(test::rel_err(v.grad_w[q], num), 1e-4) << "w" << q << " point " << point;
    }
    auto p = head.flat();
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double keep = p[k];
      p[k] = keep + 1e-5;
      const double up = joint_objective(set(), w, head.with_flat(p), terms, false).loss.total;
      p[k] = keep - 1e-5;
      const double down = joint_objective(set(), w, head.with_flat(p), terms, false).loss.total;
      p[k] = keep;
      const double num = (up - down) / 2e-5;
      if (terms.task_weight == 0.0 && terms.weights.gamma == 0.0)
        EXPECT_EQ(v.grad_head[k], 0.0);
      else
        EXPECT_LT(test::rel_err(v.grad_head[k], num), 1e-4) << "head " << k << " point " << point;
    }
  }
}

}  // namespace

TEST(Predictor, ConsistencyObjectiveGradient) {
  ObjectiveTerms t;
  t.task_weight = 0.0;
  t.weights = {1.0, 0.0, 0.0};
  check_objective_gradient(t, 5);
}

TEST(Predictor, JointObjectiveGradientWithPenalty) {
  ObjectiveTerms t;
  t.weights = {0.7, 1.3, 2.0};
  t.lambda = 1.5;
  t.ratio = 0.4;
  t.p_original = 1.0;  // penalty always active
  check_objective_gradient(t, 6);
}

TEST(Predictor, JointObjectiveGradientWithoutPenalty) {
  ObjectiveTerms t;
  t.weights = {1.0, 1.0, 1.0};
  t.p_original = 0.0;  // penalty never active
  check_objective_gradient(t, 7);
}

TEST(Predictor, Stage3TaskOnlyMatchesStage1) {
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.alpha = cfg.beta = cfg.gamma = 0.0;
  PredictorWeights keep_all;
  keep_all.w[cell_feature::bias] = 30.0;
  const auto s3 = train_stage3_joint(set(), keep_all, trained_head(), 0.0, cfg);
  const auto s1 = train_stage1_task(set(), cfg, trained_head());
  const auto a = s3.head.flat(), b = s1.head.flat();
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-8);
  for (std::size_t e = 0; e < s1.history.size(); ++e)
    EXPECT_NEAR(s3.history[e].loss.task, s1.history[e].loss.task, 1e-10);
}

TEST(Predictor, Stage3LogsAreFinite) {
  TrainConfig cfg;
  cfg.epochs = 15;
  const auto s3 = train_stage3_joint(set(), PredictorWeights{}, trained_head(), anchor_performance(set(), trained_head()), cfg);
  ASSERT_EQ(s3.history.size(), 16u);
  for (const auto& r : s3.history) {
    EXPECT_TRUE(std::isfinite(r.loss.total));
    EXPECT_GE(r.zero_fraction, 0.0);
    EXPECT_LE(r.zero_fraction, 1.0);
  }
}

TEST(Predictor, InvalidConfigsAreRejected) {
  TrainConfig cfg;
  cfg.ratio = 0.0;
  EXPECT_THROW(train_stage2_consistency(set(), trained_head(), cfg), std::invalid_argument);
  cfg = {};
  cfg.alpha = -1.0;
  EXPECT_THROW(train_stage3_joint(set(), {}, trained_head(), 0.5, cfg), std::invalid_argument);
  cfg = {};
  cfg.epochs = -1;
  EXPECT_THROW(train_stage1_task(set(), cfg), std::invalid_argument);
  EXPECT_THROW(train_stage1_task(TrainingSet{}, TrainConfig{}), std::invalid_argument);
}

TEST(Predictor, OverflowingLogitsAreDivergence) {
  TrainingSet toy;
  toy.mask_dims = {2, 2, 1};
  TrainingFrame tf;
  tf.truth = {2, 2, {1, 0, 1, 0}};
  tf.fused = BevFeatureMap(2, 2, 1);
  for (auto& v : tf.fused.values()) v = 1e200;
  toy.frames.push_back(tf);
  TaskHead init = TaskHead::zeros(1);
  init.weights[0] = 1e200;
  TrainConfig cfg;
  cfg.epochs = 3;
  EXPECT_THROW(train_stage1_task(toy, cfg, init), DivergenceError);
}

TEST(Predictor, Stage4ZeroRatioKeepsEverything) {
  TrainConfig cfg;
  cfg.epochs = 3;
  const auto r = train_stage4_finetune(set(), frames(), ctx(), PredictorWeights{}, trained_head(), 0.0, 0.5, cfg);
  EXPECT_EQ(r.zero_fraction, 0.0);
  for (const auto& m : r.masks) EXPECT_EQ(m.zero_fraction(), 0.0);
  double unpruned = 0.0;
  for (const auto& tf : set().frames) unpruned += performance(trained_head(), tf.fused, tf.truth);
  EXPECT_NEAR(r.finetune.p_masked_before, unpruned / set().frames.size(), 1e-12);
}

TEST(Predictor, Stage4HalfRatio) {
  TrainConfig cfg;
  cfg.epochs = 20;
  PredictorWeights w;
  w.w[cell_feature::in_view] = 2.0;
  w.w[cell_feature::range] = -1.0;
  const auto r = train_stage4_finetune(set(), frames(), ctx(), w, trained_head(), 0.5, 0.5, cfg);
  EXPECT_EQ(r.zero_fraction, 0.5);
  EXPECT_GE(r.finetune.p_masked_after, r.finetune.p_masked_before);
  EXPECT_EQ(r.finetune.history.size(), 21u);
  EXPECT_EQ(r.finetune.p_masked_after, r.finetune.history[r.finetune.best_epoch].p_hard);
}

TEST(Predictor, TrainingIsDeterministic) {
  TrainConfig cfg;
  cfg.epochs = 8;
  const auto a = train_stage2_consistency(set(), trained_head(), cfg);
  const auto b = train_stage2_consistency(set(), trained_head(), cfg);
  EXPECT_EQ(a.weights.w, b.weights.w);
  cfg.jobs = 3;
  const auto c = train_stage2_consistency(set(), trained_head(), cfg);
  EXPECT_EQ(a.weights.w, c.weights.w);
}
