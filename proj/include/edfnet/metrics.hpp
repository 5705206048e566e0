#pragma once

// Descriptor matching, RANSAC registration and the evaluation metrics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "edfnet/config.hpp"
#include "edfnet/errors.hpp"
#include "edfnet/geometry.hpp"
#include "edfnet/loss.hpp"
#include "edfnet/tensor.hpp"

namespace edfnet {

struct MetricConfig {
  double inlier_distance = 0.10;       // tau_1, meters
  double inlier_ratio_threshold = 0.05;  // tau_2, fraction
  double rmse_threshold = 0.2;         // tau_3, meters
  double rotation_recall_deg = 5.0;
  double translation_recall = 0.6;     // meters
  std::size_t adaptive_k = 5;
  std::size_t ransac_iterations = 50000;
  double ransac_inlier = 0.10;         // defaults to tau_1
  double gt_threshold = 0.05;          // ground-truth correspondence construction
  std::size_t eval_points = 0;         // 0 = all points, else random subset

  std::vector<std::string> validate() const {
    std::vector<std::string> errs;
    if (!(inlier_distance > 0)) errs.push_back("metrics.inlier_distance: must be positive");
    if (!(inlier_ratio_threshold > 0)) errs.push_back("metrics.inlier_ratio_threshold: must be positive");
    if (!(rmse_threshold > 0)) errs.push_back("metrics.rmse_threshold: must be positive");
    if (!(rotation_recall_deg > 0)) errs.push_back("metrics.rotation_recall_deg: must be positive");
    if (!(translation_recall > 0)) errs.push_back("metrics.translation_recall: must be positive");
    if (!(ransac_inlier > 0)) errs.push_back("metrics.ransac_inlier: must be positive");
    if (!(gt_threshold > 0)) errs.push_back("metrics.gt_threshold: must be positive");
    return errs;
  }

  static MetricConfig from_config(const KeyValueConfig& kv, std::vector<std::string>& errs,
                                  MetricConfig c) {
    c.inlier_distance = kv.get_double("metrics.inlier_distance", c.inlier_distance, errs);
    c.inlier_ratio_threshold = kv.get_double("metrics.inlier_ratio_threshold", c.inlier_ratio_threshold, errs);
    c.rmse_threshold = kv.get_double("metrics.rmse_threshold", c.rmse_threshold, errs);
    c.rotation_recall_deg = kv.get_double("metrics.rotation_recall_deg", c.rotation_recall_deg, errs);
    c.translation_recall = kv.get_double("metrics.translation_recall", c.translation_recall, errs);
    c.adaptive_k = static_cast<std::size_t>(
        std::max<long long>(0, kv.get_int("metrics.adaptive_k", static_cast<long long>(c.adaptive_k), errs)));
    c.ransac_iterations = static_cast<std::size_t>(std::max<long long>(
        0, kv.get_int("metrics.ransac_iterations", static_cast<long long>(c.ransac_iterations), errs)));
    c.ransac_inlier = kv.get_double("metrics.ransac_inlier", c.inlier_distance, errs);
    c.gt_threshold = kv.get_double("metrics.gt_threshold", c.gt_threshold, errs);
    c.eval_points = static_cast<std::size_t>(
        std::max<long long>(0, kv.get_int("metrics.eval_points", static_cast<long long>(c.eval_points), errs)));
    return c;
  }
};

// ---------------------------------------------------------------------------
// Matching

struct MatchSet {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (source, target)
  std::vector<double> distances;                          // descriptor distance

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
};

/// Nearest target descriptor for every source descriptor (Euclidean, ties to
/// the lower target index).
inline MatchSet nn_match(const ad::Array& source_desc, const ad::Array& target_desc) {
  if (target_desc.rows() == 0) throw Error("nn_match: empty target descriptor set");
  if (source_desc.cols() != target_desc.cols()) throw ShapeError("nn_match: descriptor widths differ");
  const std::size_t v = source_desc.cols();
  MatchSet out;
  out.pairs.reserve(source_desc.rows());
  out.distances.reserve(source_desc.rows());
  for (std::size_t i = 0; i < source_desc.rows(); ++i) {
    const double* a = source_desc.data() + i * v;
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < target_desc.rows(); ++j) {
      const double* b = target_desc.data() + j * v;
      double d2 = 0.0;
      for (std::size_t k = 0; k < v; ++k) d2 += (a[k] - b[k]) * (a[k] - b[k]);
      if (d2 < best) {
        best = d2;
        best_j = j;
      }
    }
    out.pairs.emplace_back(i, best_j);
    out.distances.push_back(std::sqrt(best));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rigid metrics

/// Fraction of matches whose ground-truth-transformed source point lands
/// strictly within `tau` of the matched target point.
inline double inlier_ratio(const MatchSet& matches, const RigidTransform& gt, std::span<const Vec3> source,
                           std::span<const Vec3> target, double tau) {
  if (matches.empty()) throw Error("inlier_ratio: empty match set");
  std::size_t hits = 0;
  for (const auto& [i, j] : matches.pairs) {
    if ((gt.apply(source[i]) - target[j]).norm() < tau) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(matches.size());
}

/// Fraction of pairs whose inlier ratio is strictly above `tau2`.
inline double feature_matching_recall(std::span<const double> ratios, double tau2) {
  if (ratios.empty()) throw Error("feature_matching_recall: no pairs");
  const auto hits = std::count_if(ratios.begin(), ratios.end(), [tau2](double r) { return r > tau2; });
  return static_cast<double>(hits) / static_cast<double>(ratios.size());
}

/// RMSE of ground-truth correspondences under an estimated transform.
inline double rmse_dis(const RigidTransform& estimate, const CorrespondenceSet& gt_pairs,
                       std::span<const Vec3> source, std::span<const Vec3> target) {
  if (gt_pairs.empty()) throw Error("rmse_dis: empty correspondence set");
  double s = 0.0;
  for (const auto& [i, j] : gt_pairs.pairs) s += (estimate.apply(source[i]) - target[j]).squaredNorm();
  return std::sqrt(s / static_cast<double>(gt_pairs.size()));
}

/// Fraction of pairs with RMSE strictly below `tau3`.
inline double registration_recall(std::span<const double> rmse, double tau3) {
  if (rmse.empty()) throw Error("registration_recall: no pairs");
  const auto hits = std::count_if(rmse.begin(), rmse.end(), [tau3](double r) { return r < tau3; });
  return static_cast<double>(hits) / static_cast<double>(rmse.size());
}

/// Geodesic angle (radians, in [0, π]) between two rotations.
inline double rotation_error(const Mat3& predicted, const Mat3& truth) {
  const double c = ((predicted.transpose() * truth).trace() - 1.0) / 2.0;
  return std::acos(std::clamp(c, -1.0, 1.0));
}

inline double rad_to_deg(double r) { return r * 180.0 / std::numbers::pi; }

/// Euclidean translation error (unsquared norm, meters).
inline double translation_error(const Vec3& predicted, const Vec3& truth) { return (predicted - truth).norm(); }

// ---------------------------------------------------------------------------
// Non-rigid metrics

/// Symmetric mean of squared nearest-neighbor distances.
inline double chamfer_distance(std::span<const Vec3> a, std::span<const Vec3> b) {
  if (a.empty() || b.empty()) throw Error("chamfer_distance: empty cloud");
  auto one_way = [](std::span<const Vec3> from, std::span<const Vec3> to) {
    const KdTree tree(to);
    double s = 0.0;
    for (const auto& p : from) {
      const double d = tree.knn_search(p, 1).front().first;
      s += d * d;
    }
    return s / static_cast<double>(from.size());
  };
  return one_way(a, b) + one_way(b, a);
}

/// Per point, mean distance to its K nearest other points. K = 0 yields a
/// zero threshold everywhere.
inline std::vector<double> adaptive_threshold(std::span<const Vec3> cloud, std::size_t k) {
  if (k == 0) return std::vector<double>(cloud.size(), 0.0);
  if (cloud.size() <= k) throw Error("adaptive_threshold: cloud must have more than K points");
  const KdTree tree(cloud);
  std::vector<double> kappa(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto nn = tree.knn_search(cloud[i], k + 1);
    double s = 0.0;
    std::size_t used = 0;
    bool skipped_self = false;
    for (const auto& [d, j] : nn) {
      if (!skipped_self && j == i) {
        skipped_self = true;
        continue;
      }
      if (used == k) break;
      s += d;
      ++used;
    }
    kappa[i] = s / static_cast<double>(k);
  }
  return kappa;
}

/// Inlier ratio with per-point thresholds for dense (non-rigid) ground truth:
/// match (i, j) counts when ‖y_j − y_g(i)‖ ≤ κ_g(i), g being the true target
/// index of source i. Sources without a true counterpart are ignored.
inline double adaptive_inlier_ratio(const MatchSet& matches, std::span<const long> true_target,
                                    std::span<const Vec3> target, std::span<const double> kappa) {
  std::size_t hits = 0, total = 0;
  for (const auto& [i, j] : matches.pairs) {
    const long g = true_target[i];
    if (g < 0) continue;
    ++total;
    const auto gi = static_cast<std::size_t>(g);
    if ((target[j] - target[gi]).norm() <= kappa[gi]) ++hits;
  }
  if (total == 0) throw Error("adaptive_inlier_ratio: no matches with ground truth");
  return static_cast<double>(hits) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// RANSAC

struct RegistrationResult {
  RigidTransform transform;
  std::size_t inliers = 0;
  std::size_t iterations = 0;
  bool success = false;
};

inline constexpr double kMinTriangleArea = 1e-8;

/// Three-point RANSAC over putative matches with a final least-squares refit
/// on the best consensus set. The best hypothesis is the one with the most
/// inliers, ties going to the earliest iteration.
inline RegistrationResult ransac_register(const MatchSet& matches, std::span<const Vec3> source,
                                          std::span<const Vec3> target, std::size_t max_iterations,
                                          double inlier_tau, std::uint64_t seed) {
  RegistrationResult out;
  const std::size_t m = matches.size();
  if (m < 3) return out;
  std::vector<Vec3> src(m), tgt(m);
  for (std::size_t k = 0; k < m; ++k) {
    src[k] = source[matches.pairs[k].first];
    tgt[k] = target[matches.pairs[k].second];
  }
  auto count_inliers = [&](const RigidTransform& t) {
    std::size_t c = 0;
    for (std::size_t k = 0; k < m; ++k) c += (t.apply(src[k]) - tgt[k]).norm() < inlier_tau;
    return c;
  };

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, m - 1);
  std::size_t best_count = 0;
  RigidTransform best;
  for (std::size_t it = 0; it < max_iterations; ++it) {
    ++out.iterations;
    const std::size_t a = pick(rng);
    std::size_t b = pick(rng), c = pick(rng);
    if (a == b || a == c || b == c) continue;
    const std::array<Vec3, 3> s{src[a], src[b], src[c]};
    const std::array<Vec3, 3> d{tgt[a], tgt[b], tgt[c]};
    if (0.5 * (s[1] - s[0]).cross(s[2] - s[0]).norm() < kMinTriangleArea) continue;
    RigidTransform hyp;
    try {
      hyp = kabsch_fit(s, d);
    } catch (const DegenerateFitError&) {
      continue;
    }
    const std::size_t count = count_inliers(hyp);
    if (count > best_count) {
      best_count = count;
      best = hyp;
    }
  }
  if (best_count < 3) return out;

  std::vector<Vec3> in_src, in_tgt;
  for (std::size_t k = 0; k < m; ++k) {
    if ((best.apply(src[k]) - tgt[k]).norm() < inlier_tau) {
      in_src.push_back(src[k]);
      in_tgt.push_back(tgt[k]);
    }
  }
  try {
    out.transform = kabsch_fit(in_src, in_tgt);
  } catch (const DegenerateFitError&) {
    out.transform = best;
  }
  out.inliers = count_inliers(out.transform);
  out.success = true;
  return out;
}

}  // namespace edfnet
