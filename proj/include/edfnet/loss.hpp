#pragma once

// Ground-truth correspondences and the hardest-negative contrastive loss.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "edfnet/config.hpp"
#include "edfnet/errors.hpp"
#include "edfnet/geometry.hpp"
#include "edfnet/tensor.hpp"

namespace edfnet {

struct CorrespondenceSet {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (source, target)
  double threshold = 0.0;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
};

struct LossConfig {
  double pos_margin = 0.1;
  double neg_margin = 1.4;
  double safe_radius = 0.1;
  std::size_t batch = 64;

  std::vector<std::string> validate() const {
    std::vector<std::string> errs;
    if (!(pos_margin >= 0.0 && pos_margin < neg_margin)) {
      errs.push_back("loss: margins must satisfy 0 <= pos_margin < neg_margin");
    }
    if (!(safe_radius > 0.0)) errs.push_back("loss.safe_radius: must be positive");
    if (batch < 1) errs.push_back("loss.batch: must be at least 1");
    return errs;
  }

  static LossConfig from_config(const KeyValueConfig& kv, std::vector<std::string>& errs,
                                LossConfig c) {
    c.pos_margin = kv.get_double("loss.pos_margin", c.pos_margin, errs);
    c.neg_margin = kv.get_double("loss.neg_margin", c.neg_margin, errs);
    c.safe_radius = kv.get_double("loss.safe_radius", c.safe_radius, errs);
    c.batch = static_cast<std::size_t>(
        std::max<long long>(0, kv.get_int("loss.batch", static_cast<long long>(c.batch), errs)));
    return c;
  }
};

/// Pairs (i, j) where j is the target point nearest to gt(source_i) and that
/// distance is below `threshold`.
inline CorrespondenceSet build_gt_correspondences(const PointCloud& source, const PointCloud& target,
                                                  const RigidTransform& gt, double threshold) {
  if (!gt.valid(1e-6)) throw Error("build_gt_correspondences: invalid ground-truth transform");
  CorrespondenceSet out;
  out.threshold = threshold;
  if (!target.empty()) {
    const KdTree tree(target.points);
    for (std::size_t i = 0; i < source.size(); ++i) {
      const auto nn = tree.knn_search(gt.apply(source.points[i]), 1);
      if (nn.front().first < threshold) out.pairs.emplace_back(i, nn.front().second);
    }
  }
  if (out.empty()) throw NoOverlapError("no ground-truth correspondences within threshold");
  return out;
}

/// n pairs drawn uniformly without replacement (all of them, shuffled, when
/// the set is smaller).
inline CorrespondenceSet sample_correspondences(const CorrespondenceSet& all, std::size_t n,
                                                std::uint64_t seed) {
  std::vector<std::size_t> order(all.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(std::min(n, order.size()));
  CorrespondenceSet out;
  out.threshold = all.threshold;
  for (auto k : order) out.pairs.push_back(all.pairs[k]);
  return out;
}

inline double positive_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("positive_distance: descriptor widths differ");
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

inline std::span<const double> row_span(const ad::Array& a, std::size_t r) {
  return {a.data() + r * a.cols(), a.cols()};
}

struct HardNegative {
  std::size_t candidate;  // row in the batch's target descriptors
  double distance;
};

/// Hardest negative for batch row i: the batch target whose point lies more
/// than `safe_radius` from target point i and whose descriptor is closest to
/// source descriptor i. Ties go to the lower row. Empty when no candidate is
/// outside the safe radius.
inline std::optional<HardNegative> hardest_negative(std::size_t i, const ad::Array& source_desc,
                                                    const ad::Array& target_desc,
                                                    std::span<const Vec3> target_points,
                                                    double safe_radius) {
  std::optional<HardNegative> best;
  for (std::size_t j = 0; j < target_desc.rows(); ++j) {
    if ((target_points[j] - target_points[i]).norm() <= safe_radius) continue;
    const double d = positive_distance(row_span(source_desc, i), row_span(target_desc, j));
    if (!best || d < best->distance) best = HardNegative{j, d};
  }
  return best;
}

/// Value form: mean over pairs of the positive and negative hinges. Pairs
/// without a negative (nullopt) contribute only their positive hinge.
inline double contrastive_loss_value(std::span<const double> d_pos,
                                     std::span<const std::optional<double>> d_neg, const LossConfig& cfg) {
  if (d_pos.size() != d_neg.size() || d_pos.empty()) throw Error("contrastive loss: bad batch");
  double total = 0.0;
  for (std::size_t i = 0; i < d_pos.size(); ++i) {
    total += std::max(0.0, d_pos[i] - cfg.pos_margin);
    if (d_neg[i]) total += std::max(0.0, cfg.neg_margin - *d_neg[i]);
  }
  return total / static_cast<double>(d_pos.size());
}

struct LossTerms {
  ad::Var loss;
  std::size_t pairs = 0;
  std::size_t skipped_negatives = 0;  // pairs with no eligible negative
  std::size_t active_negatives = 0;   // pairs with d_neg < neg_margin
  std::size_t active_positives = 0;   // pairs with d_pos > pos_margin
  std::vector<std::optional<HardNegative>> negatives;
};

/// Contrastive loss over a batch. Row i of `source_desc` and `target_desc`
/// form the i-th positive pair; `target_points` are the batch's target
/// positions used for the safe-radius test. Negative selection is an argmin
/// evaluated on values and held fixed for the backward pass.
inline LossTerms contrastive_loss(ad::Var source_desc, ad::Var target_desc,
                                  std::span<const Vec3> target_points, const LossConfig& cfg) {
  ad::Tape& t = *source_desc.tape;
  const ad::Array& sv = t.value(source_desc);
  const ad::Array& tv = t.value(target_desc);
  if (!sv.same_shape(tv)) {
    throw ShapeError("contrastive loss: descriptor batches differ: " + ad::shape_str(sv.shape()) + " vs " +
                     ad::shape_str(tv.shape()));
  }
  if (target_points.size() != tv.rows()) throw ShapeError("contrastive loss: one target point per row");
  const std::size_t n = sv.rows();
  if (n == 0) throw Error("contrastive loss: empty batch");

  LossTerms out;
  out.pairs = n;
  out.negatives.resize(n);
  std::vector<std::size_t> anchor_rows, negative_rows;
  for (std::size_t i = 0; i < n; ++i) {
    out.negatives[i] = hardest_negative(i, sv, tv, target_points, cfg.safe_radius);
    if (!out.negatives[i]) {
      ++out.skipped_negatives;
      continue;
    }
    if (out.negatives[i]->distance < cfg.neg_margin) ++out.active_negatives;
    anchor_rows.push_back(i);
    negative_rows.push_back(out.negatives[i]->candidate);
  }

  auto row_norms = [](ad::Var a, ad::Var b) { return ad::sqrt(ad::sum_cols(ad::square(ad::sub(a, b)))); };
  ad::Var d_pos = row_norms(source_desc, target_desc);
  for (std::size_t i = 0; i < n; ++i) {
    if (t.value(d_pos)(i, 0) > cfg.pos_margin) ++out.active_positives;
  }
  ad::Var total = ad::sum(ad::max_with_zero(ad::add(d_pos, t.constant(ad::Array(1, 1, -cfg.pos_margin)))));
  if (!anchor_rows.empty()) {
    ad::Var d_neg = row_norms(ad::gather_rows(source_desc, anchor_rows), ad::gather_rows(target_desc, negative_rows));
    ad::Var neg = ad::max_with_zero(ad::add(ad::scalar_mul(d_neg, -1.0), t.constant(ad::Array(1, 1, cfg.neg_margin))));
    total = ad::add(total, ad::sum(neg));
  }
  out.loss = ad::scalar_mul(total, 1.0 / static_cast<double>(n));
  return out;
}

}  // namespace edfnet
