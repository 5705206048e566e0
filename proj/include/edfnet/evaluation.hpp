#pragma once

// Per-pair evaluation, aggregation and JSON/CSV metric reports.

#include <cstdint>
#include <cstdio>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "edfnet/fusion.hpp"
#include "edfnet/geometry.hpp"
#include "edfnet/loss.hpp"
#include "edfnet/metrics.hpp"
#include "edfnet/model.hpp"
#include "edfnet/synthetic.hpp"
#include "edfnet/training.hpp"

namespace edfnet {

struct PairReport {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  std::size_t source_points = 0, target_points = 0, matches = 0;
  double inlier_ratio = 0.0;

  bool registered = false;  // RANSAC produced a hypothesis
  std::size_t ransac_inliers = 0;
  std::optional<RigidTransform> estimate;
  std::optional<double> rmse;
  std::optional<double> rotation_error_deg, translation_error;
  bool success = false;  // RE and TE within the recall thresholds

  std::optional<double> adaptive_inlier_ratio, chamfer;
};

struct EvalReport {
  std::vector<PairReport> pairs;
  double feature_matching_recall = 0.0;
  double mean_inlier_ratio = 0.0;
  std::optional<double> registration_recall;
  std::optional<double> mean_rotation_error_deg, mean_translation_error;  // successful pairs only
  std::size_t successful = 0, failed = 0;
  std::optional<double> mean_adaptive_inlier_ratio, mean_chamfer;
};

/// Nearest-neighbor matching between row subsets, reported in cloud indices.
inline MatchSet match_rows(const DescriptorSet& source, const DescriptorSet& target,
                           std::span<const std::size_t> source_rows, std::span<const std::size_t> target_rows) {
  MatchSet m = nn_match(source.descriptors, target.descriptors);
  for (auto& [i, j] : m.pairs) {
    i = source_rows[i];
    j = target_rows[j];
  }
  return m;
}

/// Registration fields of a pair report for a given estimate.
inline void score_registration(PairReport& r, const RigidTransform& estimate, const RigidTransform& gt,
                               const CorrespondenceSet& gt_pairs, std::span<const Vec3> source,
                               std::span<const Vec3> target, const MetricConfig& cfg) {
  r.registered = true;
  r.estimate = estimate;
  r.rmse = rmse_dis(estimate, gt_pairs, source, target);
  r.rotation_error_deg = rad_to_deg(rotation_error(estimate.rotation, gt.rotation));
  r.translation_error = translation_error(estimate.translation, gt.translation);
  r.success = *r.rotation_error_deg <= cfg.rotation_recall_deg && *r.translation_error <= cfg.translation_recall;
}

/// Aggregates over pair reports. RE/TE means use successful pairs only.
inline void aggregate(EvalReport& rep, const MetricConfig& cfg) {
  std::vector<double> ratios, rmses, adaptive, chamfers;
  double re = 0.0, te = 0.0;
  rep.successful = rep.failed = 0;
  for (const auto& p : rep.pairs) {
    ratios.push_back(p.inlier_ratio);
    if (p.rmse) rmses.push_back(*p.rmse);
    if (p.registered || p.rmse) {
      if (p.success) {
        ++rep.successful;
        re += *p.rotation_error_deg;
        te += *p.translation_error;
      } else {
        ++rep.failed;
      }
    }
    if (p.adaptive_inlier_ratio) adaptive.push_back(*p.adaptive_inlier_ratio);
    if (p.chamfer) chamfers.push_back(*p.chamfer);
  }
  if (ratios.empty()) throw Error("aggregate: no pairs");
  rep.feature_matching_recall = feature_matching_recall(ratios, cfg.inlier_ratio_threshold);
  double s = 0.0;
  for (double r : ratios) s += r;
  rep.mean_inlier_ratio = s / static_cast<double>(ratios.size());
  // Unregistered pairs count as registration failures.
  if (!rmses.empty()) {
    std::size_t hits = 0;
    for (double r : rmses) hits += r < cfg.rmse_threshold;
    rep.registration_recall = static_cast<double>(hits) / static_cast<double>(rep.pairs.size());
  }
  if (rep.successful > 0) {
    rep.mean_rotation_error_deg = re / static_cast<double>(rep.successful);
    rep.mean_translation_error = te / static_cast<double>(rep.successful);
  }
  auto mean = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    return m / static_cast<double>(v.size());
  };
  if (!adaptive.empty()) rep.mean_adaptive_inlier_ratio = mean(adaptive);
  if (!chamfers.empty()) rep.mean_chamfer = mean(chamfers);
}

/// Seeded subset of row indices (all rows, in order, when `count` is 0 or
/// not smaller than n).
inline std::vector<std::size_t> sample_rows(std::size_t n, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = i;
  if (count == 0 || count >= n) return rows;
  std::mt19937_64 rng(seed);
  std::shuffle(rows.begin(), rows.end(), rng);
  rows.resize(count);
  std::sort(rows.begin(), rows.end());
  return rows;
}

struct EvalOptions {
  bool ransac = true;
};

/// Descriptors, matching and every applicable metric for one pair.
inline PairReport evaluate_pair(Network& net, const SyntheticPair& pair, const MetricConfig& cfg,
                                std::uint64_t seed, const EvalOptions& opts) {
  PairReport r;
  r.seed = seed;
  r.source_points = pair.source.size();
  r.target_points = pair.target.size();
  const auto rows_x = sample_rows(pair.source.size(), cfg.eval_points, derive_seed(seed, 11));
  const auto rows_y = sample_rows(pair.target.size(), cfg.eval_points, derive_seed(seed, 12));
  auto [dx, dy] = net.describe(pair.source, pair.target, rows_x, rows_y);
  const MatchSet m = match_rows(dx, dy, rows_x, rows_y);
  r.matches = m.size();
  r.inlier_ratio = inlier_ratio(m, pair.gt, pair.source.points, pair.target.points, cfg.inlier_distance);

  if (opts.ransac) {
    const RegistrationResult reg = ransac_register(m, pair.source.points, pair.target.points, cfg.ransac_iterations,
                                                   cfg.ransac_inlier, derive_seed(seed, 13));
    r.ransac_inliers = reg.inliers;
    if (reg.success) {
      const CorrespondenceSet gt_pairs =
          build_gt_correspondences(pair.source, pair.target, pair.gt, cfg.gt_threshold);
      score_registration(r, reg.transform, pair.gt, gt_pairs, pair.source.points, pair.target.points, cfg);
    }
  }

  // Dense point-wise ground truth is always available for synthetic pairs.
  const auto kappa = adaptive_threshold(pair.target.points, cfg.adaptive_k);
  r.adaptive_inlier_ratio = adaptive_inlier_ratio(m, pair.source_to_target, pair.target.points, kappa);
  std::vector<Vec3> matched;
  matched.reserve(m.size());
  for (const auto& [i, j] : m.pairs) matched.push_back(pair.target.points[j]);
  r.chamfer = chamfer_distance(matched, pair.target.points);
  return r;
}

/// Held-out synthetic suite: eval_pairs pairs drawn from seeds disjoint from
/// the training pairs.
inline EvalReport evaluate(Network& net, const ExperimentConfig& cfg, const EvalOptions& opts = {}) {
  if (auto errs = cfg.validate(); !errs.empty()) throw ConfigError(errs.front());
  const std::uint64_t seed = cfg.require_seed();
  EvalReport rep;
  for (std::size_t k = 0; k < cfg.dataset.eval_pairs; ++k) {
    const std::uint64_t s = eval_pair_seed(seed, k);
    const SyntheticPair pair = generate_pair(cfg.dataset.pair, s);
    PairReport r = evaluate_pair(net, pair, cfg.metrics, s, opts);
    r.index = k;
    rep.pairs.push_back(std::move(r));
  }
  aggregate(rep, cfg.metrics);
  return rep;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json transform_json(const RigidTransform& t) {
  nlohmann::json rot = nlohmann::json::array();
  for (int r = 0; r < 3; ++r) rot.push_back({t.rotation(r, 0), t.rotation(r, 1), t.rotation(r, 2)});
  return {{"rotation", rot}, {"translation", {t.translation.x(), t.translation.y(), t.translation.z()}}};
}

template <typename T>
nlohmann::json opt_json(const std::optional<T>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const PairReport& p) {
  nlohmann::json j = {
      {"index", p.index},
      {"seed", p.seed},
      {"source_points", p.source_points},
      {"target_points", p.target_points},
      {"matches", p.matches},
      {"inlier_ratio", p.inlier_ratio},
      {"registered", p.registered},
      {"ransac_inliers", p.ransac_inliers},
      {"rmse", opt_json(p.rmse)},
      {"rotation_error_deg", opt_json(p.rotation_error_deg)},
      {"translation_error", opt_json(p.translation_error)},
      {"status", !p.registered ? "unregistered" : (p.success ? "success" : "failed")},
      {"adaptive_inlier_ratio", opt_json(p.adaptive_inlier_ratio)},
      {"chamfer", opt_json(p.chamfer)},
  };
  j["estimate"] = p.estimate ? transform_json(*p.estimate) : nlohmann::json(nullptr);
  return j;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& p : r.pairs) pairs.push_back(to_json(p));
  return {
      {"pairs", pairs},
      {"aggregate",
       {
           {"pair_count", r.pairs.size()},
           {"feature_matching_recall", r.feature_matching_recall},
           {"mean_inlier_ratio", r.mean_inlier_ratio},
           {"registration_recall", opt_json(r.registration_recall)},
           {"mean_rotation_error_deg", opt_json(r.mean_rotation_error_deg)},
           {"mean_translation_error", opt_json(r.mean_translation_error)},
           {"successful", r.successful},
           {"failed", r.failed},
           {"mean_adaptive_inlier_ratio", opt_json(r.mean_adaptive_inlier_ratio)},
           {"mean_chamfer", opt_json(r.mean_chamfer)},
       }},
  };
}

inline void write_report_csv(std::ostream& out, const EvalReport& r) {
  out << "index,seed,source_points,target_points,matches,inlier_ratio,status,ransac_inliers,rmse,"
         "rotation_error_deg,translation_error,adaptive_inlier_ratio,chamfer\n";
  char buf[32];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  auto opt = [&](const std::optional<double>& v) { return v ? num(*v) : std::string(); };
  for (const auto& p : r.pairs) {
    out << p.index << ',' << p.seed << ',' << p.source_points << ',' << p.target_points << ',' << p.matches << ','
        << num(p.inlier_ratio) << ',' << (!p.registered ? "unregistered" : (p.success ? "success" : "failed")) << ','
        << p.ransac_inliers << ',' << opt(p.rmse) << ',' << opt(p.rotation_error_deg) << ','
        << opt(p.translation_error) << ',' << opt(p.adaptive_inlier_ratio) << ',' << opt(p.chamfer) << '\n';
  }
}

}  // namespace edfnet
