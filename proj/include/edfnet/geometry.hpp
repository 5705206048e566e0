#pragma once

// Point containers, rigid transforms, spatial queries and augmentation.
// Geometry is always double precision.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <tuple>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "edfnet/errors.hpp"

namespace edfnet {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct PointCloud {
  std::vector<Vec3> points;
  // One row per point when present.
  std::optional<Eigen::MatrixXd> features;

  PointCloud() = default;
  explicit PointCloud(std::vector<Vec3> pts) : points(std::move(pts)) {}

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }

  bool valid() const {
    for (const auto& p : points) {
      if (!p.allFinite()) return false;
    }
    return !features || static_cast<std::size_t>(features->rows()) == points.size();
  }
};

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  RigidTransform inverse() const {
    RigidTransform inv;
    inv.rotation = rotation.transpose();
    inv.translation = -(inv.rotation * translation);
    return inv;
  }

  // (a * b)(p) = a(b(p))
  friend RigidTransform operator*(const RigidTransform& a, const RigidTransform& b) {
    RigidTransform c;
    c.rotation = a.rotation * b.rotation;
    c.translation = a.rotation * b.translation + a.translation;
    return c;
  }

  bool valid(double tol = 1e-9) const {
    if (!rotation.allFinite() || !translation.allFinite()) return false;
    const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
    return ortho <= tol && std::abs(rotation.determinant() - 1.0) <= tol;
  }
};

inline Mat3 axis_angle_rotation(const Vec3& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

inline PointCloud apply_transform(const RigidTransform& t, const PointCloud& cloud) {
  PointCloud out;
  out.points.reserve(cloud.size());
  for (const auto& p : cloud.points) out.points.push_back(t.apply(p));
  out.features = cloud.features;
  return out;
}

// ---------------------------------------------------------------------------
// Grid subsampling

namespace detail {

using VoxelKey = std::array<std::int64_t, 3>;

inline VoxelKey voxel_of(const Vec3& p, double cell) {
  return {static_cast<std::int64_t>(std::floor(p.x() / cell)),
          static_cast<std::int64_t>(std::floor(p.y() / cell)),
          static_cast<std::int64_t>(std::floor(p.z() / cell))};
}

// Voxel -> member indices (ascending), in lexicographic voxel order.
inline std::map<VoxelKey, std::vector<std::size_t>> bucket_voxels(const PointCloud& cloud,
                                                                  double cell) {
  std::map<VoxelKey, std::vector<std::size_t>> buckets;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    buckets[voxel_of(cloud.points[i], cell)].push_back(i);
  }
  // Coordinate order inside a voxel makes sums and ties independent of the
  // input order.
  auto lex = [&](std::size_t a, std::size_t b) {
    const Vec3& p = cloud.points[a];
    const Vec3& q = cloud.points[b];
    if (p.x() != q.x()) return p.x() < q.x();
    if (p.y() != q.y()) return p.y() < q.y();
    if (p.z() != q.z()) return p.z() < q.z();
    return a < b;
  };
  for (auto& [key, members] : buckets) std::sort(members.begin(), members.end(), lex);
  return buckets;
}

inline void require_positive_cell(double cell) {
  if (!(cell > 0.0) || !std::isfinite(cell)) throw Error("grid cell must be positive");
}

}  // namespace detail

/// One point per occupied voxel at the barycenter of its members, ordered by
/// ascending voxel index. Features (when present) are averaged the same way.
inline PointCloud grid_subsample(const PointCloud& cloud, double cell) {
  detail::require_positive_cell(cell);
  PointCloud out;
  if (cloud.empty()) return out;
  const auto buckets = detail::bucket_voxels(cloud, cell);
  out.points.reserve(buckets.size());
  Eigen::MatrixXd feats;
  if (cloud.features) feats.resize(static_cast<Eigen::Index>(buckets.size()), cloud.features->cols());
  Eigen::Index row = 0;
  for (const auto& [key, members] : buckets) {
    Vec3 sum = Vec3::Zero();
    for (auto i : members) sum += cloud.points[i];
    out.points.push_back(sum / static_cast<double>(members.size()));
    if (cloud.features) {
      Eigen::RowVectorXd fsum = Eigen::RowVectorXd::Zero(cloud.features->cols());
      for (auto i : members) fsum += cloud.features->row(static_cast<Eigen::Index>(i));
      feats.row(row) = fsum / static_cast<double>(members.size());
    }
    ++row;
  }
  if (cloud.features) out.features = std::move(feats);
  return out;
}

/// Subset-preserving variant used by the encoder pyramid: per voxel, the
/// member nearest its barycenter (ties to the lower index). Returned indices
/// are in ascending voxel order.
inline std::vector<std::size_t> grid_subsample_indices(const PointCloud& cloud, double cell) {
  detail::require_positive_cell(cell);
  std::vector<std::size_t> picked;
  if (cloud.empty()) return picked;
  const auto buckets = detail::bucket_voxels(cloud, cell);
  picked.reserve(buckets.size());
  for (const auto& [key, members] : buckets) {
    Vec3 sum = Vec3::Zero();
    for (auto i : members) sum += cloud.points[i];
    const Vec3 center = sum / static_cast<double>(members.size());
    std::size_t best = members.front();
    double best_d = (cloud.points[best] - center).squaredNorm();
    for (auto i : members) {
      const double d = (cloud.points[i] - center).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    picked.push_back(best);
  }
  return picked;
}

inline PointCloud select_points(const PointCloud& cloud, std::span<const std::size_t> indices) {
  PointCloud out;
  out.points.reserve(indices.size());
  for (auto i : indices) out.points.push_back(cloud.points[i]);
  if (cloud.features) {
    Eigen::MatrixXd f(static_cast<Eigen::Index>(indices.size()), cloud.features->cols());
    for (std::size_t r = 0; r < indices.size(); ++r) {
      f.row(static_cast<Eigen::Index>(r)) = cloud.features->row(static_cast<Eigen::Index>(indices[r]));
    }
    out.features = std::move(f);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Spatial queries

struct NeighborLists {
  std::vector<std::vector<std::size_t>> lists;  // ascending support index
  double radius = 0.0;

  std::size_t size() const { return lists.size(); }
  const std::vector<std::size_t>& operator[](std::size_t q) const { return lists[q]; }
};

struct KnnResult {
  std::vector<std::vector<std::size_t>> indices;
  std::vector<std::vector<double>> distances;
  std::size_t k = 0;
  bool short_result = false;  // support had fewer than k points
};

/// Static k-d tree over a point set. Immutable after construction.
class KdTree {
 public:
  explicit KdTree(std::span<const Vec3> points, std::size_t leaf_size = 12)
      : points_(points.begin(), points.end()), leaf_size_(leaf_size) {
    order_.resize(points_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    if (!points_.empty()) build(0, points_.size());
  }

  std::size_t size() const { return points_.size(); }

  /// All indices with ‖p − q‖ ≤ radius, ascending.
  std::vector<std::size_t> radius_search(const Vec3& q, double radius) const {
    std::vector<std::size_t> out;
    if (!nodes_.empty()) radius_recurse(0, q, radius, radius * radius, out);
    std::sort(out.begin(), out.end());
    return out;
  }

  /// k nearest by (distance, index); result sorted ascending.
  std::vector<std::pair<double, std::size_t>> knn_search(const Vec3& q, std::size_t k) const {
    std::vector<std::pair<double, std::size_t>> heap;  // max-heap on (d2, idx)
    if (k == 0 || nodes_.empty()) return heap;
    heap.reserve(k + 1);
    knn_recurse(0, q, k, heap);
    std::sort_heap(heap.begin(), heap.end());
    for (auto& e : heap) e.first = std::sqrt(e.first);
    return heap;
  }

 private:
  struct Node {
    std::size_t begin, end;
    int axis = -1;  // -1 for leaf
    double split = 0.0;
    std::size_t left = 0, right = 0;
    Vec3 lo, hi;
  };

  std::size_t build(std::size_t begin, std::size_t end) {
    const std::size_t id = nodes_.size();
    nodes_.push_back(Node{begin, end, -1, 0.0, 0, 0, Vec3::Zero(), Vec3::Zero()});
    Vec3 lo = points_[order_[begin]], hi = lo;
    for (std::size_t i = begin; i < end; ++i) {
      lo = lo.cwiseMin(points_[order_[i]]);
      hi = hi.cwiseMax(points_[order_[i]]);
    }
    nodes_[id].lo = lo;
    nodes_[id].hi = hi;
    if (end - begin <= leaf_size_) return id;
    int axis;
    (hi - lo).maxCoeff(&axis);
    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin),
                     order_.begin() + static_cast<std::ptrdiff_t>(mid),
                     order_.begin() + static_cast<std::ptrdiff_t>(end),
                     [&](std::size_t a, std::size_t b) {
                       const double pa = points_[a][axis], pb = points_[b][axis];
                       return pa < pb || (pa == pb && a < b);
                     });
    nodes_[id].axis = axis;
    nodes_[id].split = points_[order_[mid]][axis];
    const std::size_t l = build(begin, mid);
    const std::size_t r = build(mid, end);
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  // Squared distance from q to a node's bounding box.
  static double box_d2(const Node& n, const Vec3& q) {
    double d2 = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double v = q[a] < n.lo[a] ? n.lo[a] - q[a] : (q[a] > n.hi[a] ? q[a] - n.hi[a] : 0.0);
      d2 += v * v;
    }
    return d2;
  }

  void radius_recurse(std::size_t id, const Vec3& q, double r, double r2,
                      std::vector<std::size_t>& out) const {
    const Node& n = nodes_[id];
    // Box test is a conservative prune; the exact test below uses the norm.
    if (box_d2(n, q) > r2 * (1.0 + 1e-12) + 1e-300) return;
    if (n.axis < 0) {
      for (std::size_t i = n.begin; i < n.end; ++i) {
        const std::size_t idx = order_[i];
        if ((points_[idx] - q).norm() <= r) out.push_back(idx);
      }
      return;
    }
    radius_recurse(n.left, q, r, r2, out);
    radius_recurse(n.right, q, r, r2, out);
  }

  void knn_recurse(std::size_t id, const Vec3& q, std::size_t k,
                   std::vector<std::pair<double, std::size_t>>& heap) const {
    const Node& n = nodes_[id];
    if (heap.size() == k && box_d2(n, q) > heap.front().first) return;
    if (n.axis < 0) {
      for (std::size_t i = n.begin; i < n.end; ++i) {
        const std::size_t idx = order_[i];
        const std::pair<double, std::size_t> cand{(points_[idx] - q).squaredNorm(), idx};
        if (heap.size() < k) {
          heap.push_back(cand);
          std::push_heap(heap.begin(), heap.end());
        } else if (cand < heap.front()) {
          std::pop_heap(heap.begin(), heap.end());
          heap.back() = cand;
          std::push_heap(heap.begin(), heap.end());
        }
      }
      return;
    }
    const bool left_first = q[n.axis] < n.split;
    knn_recurse(left_first ? n.left : n.right, q, k, heap);
    knn_recurse(left_first ? n.right : n.left, q, k, heap);
  }

  std::vector<Vec3> points_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
  std::size_t leaf_size_;
};

/// Closed-ball radius search: every support point with ‖s − q‖ ≤ radius.
inline NeighborLists radius_neighbors(std::span<const Vec3> queries, const KdTree& support,
                                      double radius) {
  if (!(radius > 0.0)) throw Error("radius must be positive");
  NeighborLists out;
  out.radius = radius;
  out.lists.reserve(queries.size());
  for (const auto& q : queries) out.lists.push_back(support.radius_search(q, radius));
  return out;
}

inline NeighborLists radius_neighbors(const PointCloud& queries, const PointCloud& support,
                                      double radius) {
  const KdTree tree(support.points);
  return radius_neighbors(queries.points, tree, radius);
}

inline KnnResult knn(std::span<const Vec3> queries, const KdTree& support, std::size_t k) {
  if (k == 0) throw Error("knn requires k >= 1");
  if (support.size() == 0) throw Error("knn requires a non-empty support set");
  KnnResult out;
  out.k = k;
  out.short_result = support.size() < k;
  out.indices.reserve(queries.size());
  out.distances.reserve(queries.size());
  for (const auto& q : queries) {
    const auto found = support.knn_search(q, k);
    std::vector<std::size_t> idx;
    std::vector<double> dist;
    idx.reserve(found.size());
    dist.reserve(found.size());
    for (const auto& [d, i] : found) {
      dist.push_back(d);
      idx.push_back(i);
    }
    out.indices.push_back(std::move(idx));
    out.distances.push_back(std::move(dist));
  }
  return out;
}

inline KnnResult knn(const PointCloud& queries, const PointCloud& support, std::size_t k) {
  if (support.empty()) throw Error("knn requires a non-empty support set");
  const KdTree tree(support.points);
  return knn(queries.points, tree, k);
}

// ---------------------------------------------------------------------------
// Rigid fit

/// Least-squares rigid transform mapping src onto tgt (Kabsch with the
/// determinant correction).
inline RigidTransform kabsch_fit(std::span<const Vec3> src, std::span<const Vec3> tgt) {
  if (src.size() != tgt.size()) throw Error("kabsch_fit: point lists differ in length");
  if (src.size() < 3) throw DegenerateFitError("kabsch_fit: need at least 3 correspondences");
  const double n = static_cast<double>(src.size());
  Vec3 cs = Vec3::Zero(), ct = Vec3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    cs += src[i];
    ct += tgt[i];
  }
  cs /= n;
  ct /= n;
  Mat3 cov = Mat3::Zero();
  Mat3 scatter = Mat3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Vec3 a = src[i] - cs;
    cov += a * (tgt[i] - ct).transpose();
    scatter += a * a.transpose();
  }
  // Collinear or coincident sources leave rotation about the line undetermined.
  const Eigen::SelfAdjointEigenSolver<Mat3> spread(scatter);
  const Vec3 ev = spread.eigenvalues();  // ascending
  if (!(ev[2] > 0.0) || ev[1] <= 1e-12 * ev[2]) {
    throw DegenerateFitError("kabsch_fit: degenerate (collinear or coincident) configuration");
  }
  const Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  RigidTransform t;
  t.rotation = svd.matrixV() * d * svd.matrixU().transpose();
  t.translation = ct - t.rotation * cs;
  return t;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentationConfig {
  double jitter_std = 0.005;
  double scale_low = 0.9;
  double scale_high = 1.1;
  double max_rotation_deg = 360.0;  // angle ~ U[0, max] about a uniform axis
  std::uint64_t seed = 0;

  bool valid() const {
    return jitter_std >= 0.0 && scale_low <= scale_high && scale_low > 0.0 &&
           max_rotation_deg >= 0.0 && max_rotation_deg <= 360.0;
  }
};

struct Augmented {
  PointCloud cloud;
  RigidTransform rotation;  // translation is zero
  double scale = 1.0;
};

inline Vec3 random_unit_vector(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  for (;;) {
    Vec3 v(g(rng), g(rng), g(rng));
    const double n = v.norm();
    if (n > 1e-12) return v / n;
  }
}

/// Scale, then rotate, then jitter. Point order and features are preserved so
/// index-based correspondences stay valid.
inline Augmented augment(const PointCloud& cloud, const AugmentationConfig& cfg) {
  if (!cfg.valid()) throw ConfigError("invalid augmentation config");
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> scale_dist(cfg.scale_low, cfg.scale_high);
  std::uniform_real_distribution<double> angle_dist(0.0, cfg.max_rotation_deg * std::numbers::pi / 180.0);
  Augmented out;
  out.scale = cfg.scale_low == cfg.scale_high ? cfg.scale_low : scale_dist(rng);
  const Vec3 axis = random_unit_vector(rng);
  const double angle = angle_dist(rng);
  out.rotation.rotation = axis_angle_rotation(axis, angle);
  std::normal_distribution<double> jitter(0.0, cfg.jitter_std > 0.0 ? cfg.jitter_std : 1.0);
  out.cloud.points.reserve(cloud.size());
  for (const auto& p : cloud.points) {
    Vec3 q = out.rotation.rotation * (out.scale * p);
    if (cfg.jitter_std > 0.0) q += Vec3(jitter(rng), jitter(rng), jitter(rng));
    out.cloud.points.push_back(q);
  }
  out.cloud.features = cloud.features;
  return out;
}

}  // namespace edfnet
