#pragma once

// Desk-scale perception task: logistic per-column occupancy over the fused BEV
// map. Supplies the task loss and the scalar performance P (occupancy IoU).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Eigenvalues>

#include "json.hpp"
#include "mjp/data.hpp"
#include "mjp/features.hpp"
#include "mjp/voxelgrid.hpp"

namespace mjp {

struct OccupancyTruth {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> occupied;  // y * width + x

  std::size_t size() const { return occupied.size(); }
};

/// A BEV column is occupied iff its center lies inside some box's x-y footprint.
inline OccupancyTruth occupancy_truth(const VoxelGridSpec& spec, const BlockMap& bm, std::span<const Box> boxes) {
  const Dims3& md = bm.mask_dims();
  const double cell_x = spec.voxel_size().x() * bm.block().x;
  const double cell_y = spec.voxel_size().y() * bm.block().y;
  OccupancyTruth t{md.x, md.y, std::vector<std::uint8_t>(static_cast<std::size_t>(md.x) * md.y, 0)};
  for (int y = 0; y < md.y; ++y) {
    for (int x = 0; x < md.x; ++x) {
      const double cx = spec.min_corner().x() + (x + 0.5) * cell_x;
      const double cy = spec.min_corner().y() + (y + 0.5) * cell_y;
      for (const auto& b : boxes) {
        if (b.contains_xy(cx, cy)) {
          t.occupied[static_cast<std::size_t>(y) * md.x + x] = 1;
          break;
        }
      }
    }
  }
  return t;
}

/// Logistic occupancy head over whitened channels:
///   z = bias + sum_k weights[k] * u_k,   u = T (x - offset)
/// offset and the C x C transform T (row-major) are fixed when the head is
/// created (see whiten_head); only weights and bias are trained.
struct TaskHead {
  std::vector<double> weights;  // one per channel
  double bias = 0.0;
  std::vector<double> offset;
  std::vector<double> transform;

  static TaskHead zeros(int channels) {
    TaskHead h{std::vector<double>(channels, 0.0), 0.0, std::vector<double>(channels, 0.0),
               std::vector<double>(static_cast<std::size_t>(channels) * channels, 0.0)};
    for (int c = 0; c < channels; ++c) h.transform[static_cast<std::size_t>(c) * channels + c] = 1.0;
    return h;
  }
  std::size_t channels() const { return weights.size(); }
  std::size_t parameter_count() const { return weights.size() + 1; }

  /// u = T (x - offset) for one column.
  std::vector<double> inputs(const BevFeatureMap& bev, std::size_t column) const {
    const std::size_t nc = channels();
    std::vector<double> u(nc, 0.0);
    for (std::size_t c = 0; c < nc; ++c) {
      const double d = bev.at(column, static_cast<int>(c)) - offset[c];
      for (std::size_t k = 0; k < nc; ++k) u[k] += transform[k * nc + c] * d;
    }
    return u;
  }

  /// d logit / d x = T^T weights, identical for every column.
  std::vector<double> feature_weights() const {
    const std::size_t nc = channels();
    std::vector<double> g(nc, 0.0);
    for (std::size_t k = 0; k < nc; ++k)
      for (std::size_t c = 0; c < nc; ++c) g[c] += weights[k] * transform[k * nc + c];
    return g;
  }

  /// Bias folded with the offset: logit = folded_bias + feature_weights . x
  double folded_bias(std::span<const double> fw) const {
    double b = bias;
    for (std::size_t c = 0; c < fw.size(); ++c) b -= fw[c] * offset[c];
    return b;
  }

  double logit(const BevFeatureMap& bev, std::size_t column) const {
    const auto fw = feature_weights();
    double z = folded_bias(fw);
    for (std::size_t c = 0; c < fw.size(); ++c) z += fw[c] * bev.at(column, static_cast<int>(c));
    return z;
  }

  /// Maps sum_col r_col (x_col - offset) to the weight gradient T a.
  std::vector<double> weight_gradient(std::span<const double> a) const {
    const std::size_t nc = channels();
    std::vector<double> g(nc, 0.0);
    for (std::size_t k = 0; k < nc; ++k)
      for (std::size_t c = 0; c < nc; ++c) g[k] += transform[k * nc + c] * a[c];
    return g;
  }

  /// Trainable parameters flattened as [weights..., bias].
  std::vector<double> flat() const {
    std::vector<double> p = weights;
    p.push_back(bias);
    return p;
  }

  TaskHead with_flat(std::span<const double> p) const {
    TaskHead h = *this;
    h.weights.assign(p.begin(), p.end() - 1);
    h.bias = p.back();
    return h;
  }

  bool finite() const {
    auto ok = [](const std::vector<double>& v) {
      return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
    };
    return ok(weights) && ok(offset) && ok(transform) && std::isfinite(bias);
  }
};

/// Zero-initialized head whose offset is the channel mean of `maps` and whose
/// transform is the symmetric inverse square root of their covariance (ZCA
/// whitening). Directions with negligible variance are left unscaled.
inline TaskHead whiten_head(std::span<const BevFeatureMap> maps) {
  if (maps.empty()) throw std::invalid_argument("whiten_head: no feature maps");
  const int nc = maps.front().channels();
  TaskHead h = TaskHead::zeros(nc);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(nc);
  double n = 0.0;
  for (const auto& m : maps) {
    if (m.channels() != nc) throw DimensionError("whiten_head: channel counts differ");
    for (std::size_t col = 0; col < m.columns(); ++col)
      for (int c = 0; c < nc; ++c) mean[c] += m.at(col, c);
    n += static_cast<double>(m.columns());
  }
  mean /= n;
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(nc, nc);
  Eigen::VectorXd d(nc);
  for (const auto& m : maps) {
    for (std::size_t col = 0; col < m.columns(); ++col) {
      for (int c = 0; c < nc; ++c) d[c] = m.at(col, c) - mean[c];
      cov.noalias() += d * d.transpose();
    }
  }
  cov /= n;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  Eigen::VectorXd inv_sqrt(nc);
  const double floor = 1e-12 * std::max(1.0, eig.eigenvalues().maxCoeff());
  for (int k = 0; k < nc; ++k) {
    const double ev = eig.eigenvalues()[k];
    inv_sqrt[k] = ev > floor ? 1.0 / std::sqrt(ev) : 1.0;
  }
  const Eigen::MatrixXd t = eig.eigenvectors() * inv_sqrt.asDiagonal() * eig.eigenvectors().transpose();
  for (int c = 0; c < nc; ++c) h.offset[c] = mean[c];
  for (int r = 0; r < nc; ++r)
    for (int c = 0; c < nc; ++c) h.transform[static_cast<std::size_t>(r) * nc + c] = t(r, c);
  return h;
}

inline nlohmann::json head_to_json(const TaskHead& h) {
  return {{"weights", h.weights}, {"bias", h.bias}, {"offset", h.offset}, {"transform", h.transform}};
}

inline TaskHead head_from_json(const nlohmann::json& j) {
  TaskHead h{j.at("weights").get<std::vector<double>>(), j.at("bias").get<double>(),
             j.at("offset").get<std::vector<double>>(), j.at("transform").get<std::vector<double>>()};
  if (h.offset.size() != h.weights.size() || h.transform.size() != h.weights.size() * h.weights.size())
    throw std::invalid_argument("head: offset/transform size does not match weights");
  return h;
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// log(1 + e^z) without overflow.
inline double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

namespace detail {
inline void check_task_dims(const TaskHead& head, const BevFeatureMap& bev, const OccupancyTruth& truth) {
  if (bev.width() != truth.width || bev.height() != truth.height) throw DimensionError("task: BEV and truth sizes differ");
  if (head.weights.size() != static_cast<std::size_t>(bev.channels()) || head.offset.size() != head.weights.size() ||
      head.transform.size() != head.weights.size() * head.weights.size())
    throw DimensionError("task: head channel count does not match the BEV map");
}
}  // namespace detail

namespace detail {
inline double fast_logit(const BevFeatureMap& bev, std::size_t column, std::span<const double> fw, double b0) {
  double z = b0;
  for (std::size_t c = 0; c < fw.size(); ++c) z += fw[c] * bev.at(column, static_cast<int>(c));
  return z;
}
}  // namespace detail

inline std::vector<double> predict_occupancy(const TaskHead& head, const BevFeatureMap& bev) {
  const auto fw = head.feature_weights();
  const double b0 = head.folded_bias(fw);
  std::vector<double> p(bev.columns());
  for (std::size_t col = 0; col < p.size(); ++col) p[col] = sigmoid(detail::fast_logit(bev, col, fw, b0));
  return p;
}

struct TaskGradient {
  double loss = 0.0;
  std::vector<double> head;      // d loss / d [weights..., bias]
  BevFeatureMap features;        // d loss / d bev (only when requested)
};

/// Mean binary cross-entropy over columns.
inline double task_loss(const TaskHead& head, const BevFeatureMap& bev, const OccupancyTruth& truth) {
  detail::check_task_dims(head, bev, truth);
  const auto fw = head.feature_weights();
  const double b0 = head.folded_bias(fw);
  double sum = 0.0;
  for (std::size_t col = 0; col < bev.columns(); ++col) {
    const double z = detail::fast_logit(bev, col, fw, b0);
    sum += softplus(z) - (truth.occupied[col] ? z : 0.0);
  }
  return sum / static_cast<double>(bev.columns());
}

inline TaskGradient task_loss_gradient(const TaskHead& head, const BevFeatureMap& bev, const OccupancyTruth& truth,
                                       bool feature_gradient = false) {
  detail::check_task_dims(head, bev, truth);
  TaskGradient g;
  if (feature_gradient) g.features = BevFeatureMap(bev.width(), bev.height(), bev.channels());
  const double inv_n = 1.0 / static_cast<double>(bev.columns());
  const std::size_t nc = head.channels();
  const auto fw = head.feature_weights();
  const double b0 = head.folded_bias(fw);
  std::vector<double> a(nc, 0.0);
  double r_sum = 0.0;
  for (std::size_t col = 0; col < bev.columns(); ++col) {
    const double z = detail::fast_logit(bev, col, fw, b0);
    const double t = truth.occupied[col] ? 1.0 : 0.0;
    g.loss += softplus(z) - t * z;
    const double r = (sigmoid(z) - t) * inv_n;
    for (std::size_t c = 0; c < nc; ++c) a[c] += r * (bev.at(col, static_cast<int>(c)) - head.offset[c]);
    r_sum += r;
    if (feature_gradient)
      for (std::size_t c = 0; c < nc; ++c) g.features.at(col, static_cast<int>(c)) = r * fw[c];
  }
  g.head = head.weight_gradient(a);
  g.head.push_back(r_sum);
  g.loss *= inv_n;
  return g;
}

/// Hard IoU of (p >= 0.5) against the truth. Empty prediction and empty truth give 1.
inline double iou(std::span<const double> probabilities, const OccupancyTruth& truth) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool p = probabilities[i] >= 0.5;
    const bool t = truth.occupied[i] != 0;
    inter += (p && t) ? 1 : 0;
    uni += (p || t) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline double performance(const TaskHead& head, const BevFeatureMap& bev, const OccupancyTruth& truth) {
  detail::check_task_dims(head, bev, truth);
  return iou(predict_occupancy(head, bev), truth);
}

/// Soft IoU: sum min(p, t) / sum max(p, t), which for binary t is
/// sum p t / (sum t + sum p (1 - t)). Empty denominator gives 1.
inline double soft_iou(std::span<const double> p, const OccupancyTruth& truth) {
  double inter = 0.0, uni = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth.occupied[i]) {
      inter += p[i];
      uni += 1.0;
    } else {
      uni += p[i];
    }
  }
  return uni == 0.0 ? 1.0 : inter / uni;
}

struct SoftIouGradient {
  double value = 0.0;
  std::vector<double> head;
  BevFeatureMap features;
};

inline SoftIouGradient soft_performance_gradient(const TaskHead& head, const BevFeatureMap& bev,
                                                 const OccupancyTruth& truth, bool feature_gradient = false) {
  detail::check_task_dims(head, bev, truth);
  const auto p = predict_occupancy(head, bev);
  double inter = 0.0, uni = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (truth.occupied[i]) {
      inter += p[i];
      uni += 1.0;
    } else {
      uni += p[i];
    }
  }
  SoftIouGradient g;
  g.head.assign(head.parameter_count(), 0.0);
  if (feature_gradient) g.features = BevFeatureMap(bev.width(), bev.height(), bev.channels());
  if (uni == 0.0) {
    g.value = 1.0;
    return g;
  }
  g.value = inter / uni;
  const std::size_t nc = head.channels();
  const auto fw = head.feature_weights();
  std::vector<double> a(nc, 0.0);
  double dz_sum = 0.0;
  for (std::size_t col = 0; col < p.size(); ++col) {
    // d(I/U)/dp = (dI/dp * U - I * dU/dp) / U^2
    const double d_p = truth.occupied[col] ? 1.0 / uni : -inter / (uni * uni);
    const double d_z = d_p * p[col] * (1.0 - p[col]);
    for (std::size_t c = 0; c < nc; ++c) a[c] += d_z * (bev.at(col, static_cast<int>(c)) - head.offset[c]);
    dz_sum += d_z;
    if (feature_gradient)
      for (std::size_t c = 0; c < nc; ++c) g.features.at(col, static_cast<int>(c)) = d_z * fw[c];
  }
  g.head = head.weight_gradient(a);
  g.head.push_back(dz_sum);
  return g;
}

inline double soft_performance(const TaskHead& head, const BevFeatureMap& bev, const OccupancyTruth& truth) {
  detail::check_task_dims(head, bev, truth);
  return soft_iou(predict_occupancy(head, bev), truth);
}

}  // namespace mjp
