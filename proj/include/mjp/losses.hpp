#pragma once

// Joint-pruning objective:
//   total = task + alpha * cons + beta * sparse + gamma * penalty
//   cons    = mean squared difference between original and pruned BEV maps
//   sparse  = (sum(1 - M_j) / N - r)^2
//   penalty = lambda * max(0, P_original - P_masked)

#include <algorithm>
#include <span>
#include <stdexcept>
#include <vector>

#include "mjp/error.hpp"
#include "mjp/features.hpp"

namespace mjp {

struct LossBreakdown {
  double task = 0.0;
  double cons = 0.0;
  double sparse = 0.0;
  double penalty = 0.0;
  double total = 0.0;
};

struct LossWeights {
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 1.0;
};

/// Normalized by element count (W * H * channels) rather than the bare squared norm.
inline double consistency_loss(const BevFeatureMap& original, const BevFeatureMap& pruned) {
  if (!original.same_shape(pruned)) throw DimensionError("consistency_loss: map shapes differ");
  if (original.size() == 0) return 0.0;
  const auto a = original.values();
  const auto b = pruned.values();
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += (a[i] - b[i]) * (a[i] - b[i]);
  return sum / static_cast<double>(a.size());
}

/// d cons / d pruned.
inline BevFeatureMap consistency_gradient(const BevFeatureMap& original, const BevFeatureMap& pruned) {
  if (!original.same_shape(pruned)) throw DimensionError("consistency_gradient: map shapes differ");
  BevFeatureMap g(pruned.width(), pruned.height(), pruned.channels());
  const double k = 2.0 / static_cast<double>(pruned.size());
  const auto a = original.values();
  const auto b = pruned.values();
  auto out = g.values();
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = k * (b[i] - a[i]);
  return g;
}

/// Fraction of zeros; for soft scores, the expected fraction sum(1 - s) / N.
inline double zero_ratio(std::span<const double> mask) {
  if (mask.empty()) throw std::invalid_argument("zero_ratio: empty mask");
  double sum = 0.0;
  for (double m : mask) sum += 1.0 - m;
  return sum / static_cast<double>(mask.size());
}

inline double sparsity_loss(std::span<const double> mask_or_scores, double target_ratio) {
  if (!(target_ratio >= 0.0 && target_ratio <= 1.0)) throw std::invalid_argument("sparsity_loss: ratio outside [0,1]");
  const double d = zero_ratio(mask_or_scores) - target_ratio;
  return d * d;
}

/// d sparse / d s_j, identical for every j.
inline double sparsity_gradient(std::span<const double> scores, double target_ratio) {
  const double d = zero_ratio(scores) - target_ratio;
  return -2.0 * d / static_cast<double>(scores.size());
}

inline double penalty_loss(double p_original, double p_masked, double lambda) {
  if (!(lambda >= 0.0)) throw std::invalid_argument("penalty_loss: lambda must be >= 0");
  return lambda * std::max(0.0, p_original - p_masked);
}

inline LossBreakdown total_loss(double task, double cons, double sparse, double penalty, const LossWeights& w) {
  if (!(w.alpha >= 0.0 && w.beta >= 0.0 && w.gamma >= 0.0)) throw std::invalid_argument("total_loss: negative weight");
  return {task, cons, sparse, penalty, task + w.alpha * cons + w.beta * sparse + w.gamma * penalty};
}

}  // namespace mjp
