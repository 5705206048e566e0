#pragma once

// Dense scale features and their learning-free fusion.
//
// Each encoder scale is interpolated back onto the input cloud by inverse
// distance weighting over K nearest sparse points, lifted to a common width v
// by a per-scale MLP, and the L resulting vectors of every point are fused
// by iterative agreement: coefficients are a softmax over logits that grow
// by the inner product between each scale vector and the current weighted
// mean.

#include <cmath>
#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "edfnet/config.hpp"
#include "edfnet/errors.hpp"
#include "edfnet/geometry.hpp"
#include "edfnet/layers.hpp"
#include "edfnet/tensor.hpp"

namespace edfnet {

enum class FusionMode { dynamic, add };

struct FusionConfig {
  std::size_t iterations = 5;   // T
  double idw_power = 2.0;       // p
  std::size_t idw_neighbors = 24;  // K
  std::size_t width = 32;       // v
  bool normalize_scales = false;  // ablation only
  bool normalize_descriptors = false;  // unit-length fused descriptors
  FusionMode mode = FusionMode::dynamic;

  std::vector<std::string> validate() const {
    std::vector<std::string> errs;
    if (iterations < 1) errs.push_back("fusion.iterations: must be at least 1");
    if (!(idw_power > 0.0)) errs.push_back("fusion.idw_power: must be positive");
    if (idw_neighbors < 1) errs.push_back("fusion.idw_neighbors: must be at least 1");
    if (width < 1) errs.push_back("fusion.width: must be at least 1");
    return errs;
  }

  static FusionConfig from_config(const KeyValueConfig& kv, std::vector<std::string>& errs,
                                  FusionConfig c) {
    c.iterations = static_cast<std::size_t>(
        std::max<long long>(0, kv.get_int("fusion.iterations", static_cast<long long>(c.iterations), errs)));
    c.idw_power = kv.get_double("fusion.idw_power", c.idw_power, errs);
    c.idw_neighbors = static_cast<std::size_t>(
        std::max<long long>(0, kv.get_int("fusion.idw_neighbors", static_cast<long long>(c.idw_neighbors), errs)));
    c.width = static_cast<std::size_t>(std::max<long long>(0, kv.get_int("fusion.width", static_cast<long long>(c.width), errs)));
    c.normalize_scales = kv.get_bool("fusion.normalize_scales", c.normalize_scales, errs);
    c.normalize_descriptors = kv.get_bool("fusion.normalize_descriptors", c.normalize_descriptors, errs);
    const std::string mode = kv.get("fusion.mode", c.mode == FusionMode::add ? "add" : "dynamic");
    if (mode == "dynamic") {
      c.mode = FusionMode::dynamic;
    } else if (mode == "add") {
      c.mode = FusionMode::add;
    } else {
      errs.push_back("fusion.mode: expected 'dynamic' or 'add'");
    }
    return c;
  }
};

// ---------------------------------------------------------------------------
// Upsampling

inline constexpr double kCoincidentDistance = 1e-12;

/// Normalized interpolation weights from sparse points to dense points.
struct IdwStencil {
  std::vector<std::vector<std::size_t>> sources;
  std::vector<std::vector<double>> weights;  // sum to one per dense point
  std::size_t sparse_count = 0;
};

inline IdwStencil build_idw(std::span<const Vec3> dense, const KdTree& sparse, std::size_t k, double power) {
  if (sparse.size() == 0) throw Error("upsample: sparse set must be non-empty");
  IdwStencil st;
  st.sparse_count = sparse.size();
  const KnnResult nn = knn(dense, sparse, k);
  st.sources.resize(dense.size());
  st.weights.resize(dense.size());
  for (std::size_t i = 0; i < dense.size(); ++i) {
    const auto& idx = nn.indices[i];
    const auto& dist = nn.distances[i];
    if (dist.front() < kCoincidentDistance) {
      st.sources[i] = {idx.front()};
      st.weights[i] = {1.0};
      continue;
    }
    double total = 0.0;
    std::vector<double> w(idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j) total += (w[j] = 1.0 / std::pow(dist[j], power));
    for (auto& x : w) x /= total;
    st.sources[i] = idx;
    st.weights[i] = std::move(w);
  }
  return st;
}

inline IdwStencil build_idw(std::span<const Vec3> dense, std::span<const Vec3> sparse, std::size_t k,
                            double power) {
  if (sparse.empty()) throw Error("upsample: sparse set must be non-empty");
  const KdTree tree(sparse);
  return build_idw(dense, tree, k, power);
}

/// Dense rows as weighted sums of sparse rows; gradients flow to the sparse
/// features only.
inline ad::Var idw_apply(ad::Var sparse_features, const IdwStencil& st) {
  ad::Tape& t = *sparse_features.tape;
  const ad::Array& f = t.value(sparse_features);
  if (f.rows() != st.sparse_count) {
    throw ShapeError("upsample: stencil built for " + std::to_string(st.sparse_count) +
                     " sparse points, features have shape " + ad::shape_str(f.shape()));
  }
  const std::size_t c = f.cols();
  ad::Array out(st.sources.size(), c);
  for (std::size_t i = 0; i < st.sources.size(); ++i) {
    const auto& src = st.sources[i];
    const auto& w = st.weights[i];
    if (src.size() == 1) {
      std::copy_n(f.data() + src[0] * c, c, out.data() + i * c);
      continue;
    }
    for (std::size_t j = 0; j < src.size(); ++j) {
      for (std::size_t d = 0; d < c; ++d) out(i, d) += w[j] * f(src[j], d);
    }
  }
  return t.record(std::move(out), {sparse_features}, [sparse_features, &st](ad::Tape& tp, std::size_t self) {
    ad::Array* gf = tp.accum(sparse_features);
    if (!gf) return;
    const ad::Array& g = tp.grad(self);
    const std::size_t c = g.cols();
    for (std::size_t i = 0; i < st.sources.size(); ++i) {
      for (std::size_t j = 0; j < st.sources[i].size(); ++j) {
        const double w = st.weights[i][j];
        for (std::size_t d = 0; d < c; ++d) (*gf)(st.sources[i][j], d) += w * g(i, d);
      }
    }
  });
}

/// Inverse-distance-weighted interpolation of one scale onto dense points.
inline ad::Array upsample_scale(std::span<const Vec3> sparse_points, const ad::Array& sparse_features,
                                std::span<const Vec3> dense_points, const FusionConfig& cfg) {
  const IdwStencil st = build_idw(dense_points, sparse_points, cfg.idw_neighbors, cfg.idw_power);
  ad::Tape t;
  return t.value(idw_apply(t.constant(sparse_features), st));
}

// ---------------------------------------------------------------------------
// Dimension unification

/// Two-layer per-row MLP D -> v (relu) -> v.
struct UnifyMlp {
  Linear first, second;

  UnifyMlp() = default;
  UnifyMlp(const std::string& name, std::size_t d_in, std::size_t width, std::mt19937_64& rng)
      : first(name + ".fc1", d_in, width, true, rng), second(name + ".fc2", width, width, true, rng) {}

  ad::Var operator()(ad::Tape& t, ad::Var x) {
    if (t.value(x).cols() != first.in()) {
      throw ShapeError("unify: expected width " + std::to_string(first.in()) + ", got shape " +
                       ad::shape_str(t.value(x).shape()));
    }
    return second(t, ad::relu(first(t, x)));
  }

  void collect(std::vector<ad::Parameter*>& out) {
    first.collect(out);
    second.collect(out);
  }
};

// ---------------------------------------------------------------------------
// Fusion

/// Fused descriptor of one point plus the coefficient trajectory
/// (coefficients[r] = softmax(b_r), r = 0..T).
struct FusedPoint {
  Eigen::VectorXd descriptor;
  std::vector<Eigen::VectorXd> coefficients;

  const Eigen::VectorXd& final_coefficients() const { return coefficients.back(); }
};

namespace detail {

inline Eigen::VectorXd softmax(const Eigen::VectorXd& b) {
  const double m = b.maxCoeff();
  Eigen::VectorXd e = (b.array() - m).exp();
  return e / e.sum();
}

}  // namespace detail

/// Iterative agreement fusion of the L scale vectors of one point.
inline FusedPoint dynamic_fuse(std::span<const Eigen::VectorXd> scales, std::size_t iterations) {
  if (scales.empty()) throw Error("dynamic_fuse: need at least one scale");
  if (iterations < 1) throw Error("dynamic_fuse: need at least one iteration");
  const auto width = scales[0].size();
  for (const auto& g : scales) {
    if (g.size() != width) throw ShapeError("dynamic_fuse: scale widths differ");
  }
  const auto count = static_cast<Eigen::Index>(scales.size());
  FusedPoint out;
  Eigen::VectorXd logits = Eigen::VectorXd::Zero(count);
  for (std::size_t r = 0; r < iterations; ++r) {
    const Eigen::VectorXd c = detail::softmax(logits);
    Eigen::VectorXd s = Eigen::VectorXd::Zero(width);
    for (Eigen::Index l = 0; l < count; ++l) s += c[l] * scales[static_cast<std::size_t>(l)];
    for (Eigen::Index l = 0; l < count; ++l) logits[l] += s.dot(scales[static_cast<std::size_t>(l)]);
    out.coefficients.push_back(c);
  }
  const Eigen::VectorXd c = detail::softmax(logits);
  out.descriptor = Eigen::VectorXd::Zero(width);
  for (Eigen::Index l = 0; l < count; ++l) out.descriptor += c[l] * scales[static_cast<std::size_t>(l)];
  out.coefficients.push_back(c);
  return out;
}

/// Batched fusion on the tape: L inputs of shape n x v -> (n x v, n x L).
inline std::pair<ad::Var, ad::Var> dynamic_fuse(ad::Tape& t, std::span<const ad::Var> scales,
                                                std::size_t iterations) {
  if (scales.empty()) throw Error("dynamic_fuse: need at least one scale");
  if (iterations < 1) throw Error("dynamic_fuse: need at least one iteration");
  const std::size_t n = t.value(scales[0]).rows();
  const std::size_t count = scales.size();
  auto weighted_sum = [&](ad::Var coeffs) {
    ad::Var s = ad::scale_rows(scales[0], ad::slice_cols(coeffs, 0, 1));
    for (std::size_t l = 1; l < count; ++l) s = ad::add(s, ad::scale_rows(scales[l], ad::slice_cols(coeffs, l, 1)));
    return s;
  };
  ad::Var logits = t.constant(ad::Array(n, count));
  for (std::size_t r = 0; r < iterations; ++r) {
    ad::Var s = weighted_sum(ad::softmax_rows(logits));
    std::vector<ad::Var> agreement;
    agreement.reserve(count);
    for (std::size_t l = 0; l < count; ++l) agreement.push_back(ad::row_dot(s, scales[l]));
    logits = ad::add(logits, ad::concat_cols(agreement));
  }
  ad::Var coeffs = ad::softmax_rows(logits);
  return {weighted_sum(coeffs), coeffs};
}

/// Equal-weight combination of the scale vectors (the addition-fusion
/// ablation, scaled by 1/L so coefficients stay on the simplex).
inline ad::Var add_fuse(std::span<const ad::Var> scales) {
  if (scales.empty()) throw Error("add_fuse: need at least one scale");
  ad::Var s = scales[0];
  for (std::size_t l = 1; l < scales.size(); ++l) s = ad::add(s, scales[l]);
  return ad::scalar_mul(s, 1.0 / static_cast<double>(scales.size()));
}

/// Row-wise unit normalization (ablation switch for pre-normalized fusion).
inline ad::Var normalize_rows(ad::Var x) {
  ad::Tape& t = *x.tape;
  const std::size_t n = t.value(x).rows();
  ad::Var norms = ad::sqrt(ad::add(ad::sum_cols(ad::square(x)), t.constant(ad::Array(n, 1, 1e-24))));
  return ad::scale_rows(x, ad::reciprocal(norms));
}

/// L dense maps of identical shape N x v for one cloud.
struct ScaleFeatureStack {
  std::vector<ad::Array> scales;

  std::size_t num_points() const { return scales.empty() ? 0 : scales[0].rows(); }
  std::size_t width() const { return scales.empty() ? 0 : scales[0].cols(); }

  void validate() const {
    if (scales.empty()) throw ShapeError("scale stack is empty");
    for (const auto& s : scales) {
      if (!s.same_shape(scales[0])) {
        throw ShapeError("scale stack maps differ in shape: " + ad::shape_str(s.shape()) + " vs " +
                         ad::shape_str(scales[0].shape()));
      }
    }
  }
};

struct DescriptorSet {
  ad::Array descriptors;   // N x v
  ad::Array coefficients;  // N x L final fusion coefficients

  std::size_t size() const { return descriptors.rows(); }
  std::size_t width() const { return descriptors.cols(); }
};

/// Per-point dynamic fusion of a whole stack.
inline DescriptorSet fuse_stack(const ScaleFeatureStack& stack, const FusionConfig& cfg) {
  stack.validate();
  const std::size_t n = stack.num_points(), v = stack.width(), count = stack.scales.size();
  DescriptorSet out{ad::Array(n, v), ad::Array(n, count)};
  std::vector<Eigen::VectorXd> point(count, Eigen::VectorXd(static_cast<Eigen::Index>(v)));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t l = 0; l < count; ++l) {
      for (std::size_t d = 0; d < v; ++d) point[l][static_cast<Eigen::Index>(d)] = stack.scales[l](i, d);
      if (cfg.normalize_scales) {
        const double nrm = point[l].norm();
        if (nrm > 0.0) point[l] /= nrm;
      }
    }
    if (cfg.mode == FusionMode::add) {
      Eigen::VectorXd s = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(v));
      for (const auto& g : point) s += g;
      s *= 1.0 / static_cast<double>(count);
      for (std::size_t d = 0; d < v; ++d) out.descriptors(i, d) = s[static_cast<Eigen::Index>(d)];
      for (std::size_t l = 0; l < count; ++l) out.coefficients(i, l) = 1.0 / static_cast<double>(count);
      continue;
    }
    const FusedPoint fp = dynamic_fuse(point, cfg.iterations);
    for (std::size_t d = 0; d < v; ++d) out.descriptors(i, d) = fp.descriptor[static_cast<Eigen::Index>(d)];
    for (std::size_t l = 0; l < count; ++l) out.coefficients(i, l) = fp.final_coefficients()[static_cast<Eigen::Index>(l)];
  }
  return out;
}

/// Diagnostics table: point index followed by the L final coefficients.
inline void write_coefficients_csv(std::ostream& out, const DescriptorSet& d) {
  out << "point";
  for (std::size_t l = 0; l < d.coefficients.cols(); ++l) out << ",c" << (l + 1);
  out << '\n';
  char buf[32];
  for (std::size_t i = 0; i < d.coefficients.rows(); ++i) {
    out << i;
    for (std::size_t l = 0; l < d.coefficients.cols(); ++l) {
      std::snprintf(buf, sizeof(buf), "%.17g", d.coefficients(i, l));
      out << ',' << buf;
    }
    out << '\n';
  }
}

}  // namespace edfnet
