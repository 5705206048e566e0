#pragma once

// Multi-scale encoder: every layer combines a kernel-point convolution over
// the cloud itself with a cross-attention block over the paired cloud.
//
// Level 0 is the (optionally pre-subsampled) input cloud carrying the initial
// features. Layer l (1..L) maps level l-1 to level l, where level l is a
// voxel-representative subset of level l-1, and produces D^l channels.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "edfnet/config.hpp"
#include "edfnet/errors.hpp"
#include "edfnet/geometry.hpp"
#include "edfnet/layers.hpp"
#include "edfnet/tensor.hpp"

namespace edfnet {

// ---------------------------------------------------------------------------
// Kernel points

/// Linear hat correlation max(0, 1 − ‖offset − kernel_point‖ / sigma).
inline double kernel_correlation(const Vec3& offset, const Vec3& kernel_point, double sigma) {
  return std::max(0.0, 1.0 - (offset - kernel_point).norm() / sigma);
}

inline constexpr double kKernelShellFraction = 0.66;

/// Origin plus S−1 points on a shell of radius 0.66·radius, spread by
/// inverse-square repulsion (1000 projected descent steps from a seeded
/// random start).
inline std::vector<Vec3> init_kernel_points(std::size_t count, double radius, std::uint64_t seed) {
  if (count < 2) throw Error("kernel point count must be at least 2");
  std::mt19937_64 rng(seed);
  const std::size_t n = count - 1;
  std::vector<Vec3> unit(n);
  for (auto& u : unit) u = random_unit_vector(rng);

  constexpr int kSteps = 1000;
  std::vector<Vec3> force(n);
  for (int step = 0; step < kSteps && n > 1; ++step) {
    for (std::size_t i = 0; i < n; ++i) {
      Vec3 f = Vec3::Zero();
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const Vec3 d = unit[i] - unit[j];
        const double r = std::max(d.norm(), 1e-9);
        f += d / (r * r * r);
      }
      force[i] = f - f.dot(unit[i]) * unit[i];
    }
    const double lr = 0.5 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) unit[i] = (unit[i] + lr * force[i]).normalized();
  }

  std::vector<Vec3> pts;
  pts.reserve(count);
  pts.push_back(Vec3::Zero());
  for (const auto& u : unit) pts.push_back(kKernelShellFraction * radius * u);
  return pts;
}

/// Precomputed neighborhoods and correlations for one convolution.
struct ConvStencil {
  std::size_t kernel_count = 0;
  std::vector<std::vector<std::size_t>> neighbors;  // per query, ascending
  std::vector<std::vector<double>> correlations;    // per query, |N| x S row-major
  std::vector<std::size_t> empty_queries;           // coverage report
};

inline ConvStencil build_stencil(std::span<const Vec3> queries, std::span<const Vec3> support,
                                 const KdTree& support_tree, double radius,
                                 std::span<const Vec3> kernel_points, double sigma) {
  ConvStencil st;
  st.kernel_count = kernel_points.size();
  const NeighborLists nl = radius_neighbors(queries, support_tree, radius);
  st.neighbors = nl.lists;
  st.correlations.resize(queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto& nb = st.neighbors[q];
    if (nb.empty()) st.empty_queries.push_back(q);
    auto& h = st.correlations[q];
    h.resize(nb.size() * st.kernel_count);
    for (std::size_t j = 0; j < nb.size(); ++j) {
      const Vec3 offset = support[nb[j]] - queries[q];
      for (std::size_t s = 0; s < st.kernel_count; ++s) {
        h[j * st.kernel_count + s] = kernel_correlation(offset, kernel_points[s], sigma);
      }
    }
  }
  return st;
}

/// A(q, s·D + d) = (1/|N_q|) Σ_j h(q, j, s) · F(j, d). Linear in F.
inline ad::Var kernel_aggregate(ad::Var features, const ConvStencil& st) {
  ad::Tape& t = *features.tape;
  const ad::Array& f = t.value(features);
  const std::size_t d_in = f.cols();
  const std::size_t s_count = st.kernel_count;
  ad::Array a(st.neighbors.size(), s_count * d_in);
  for (std::size_t q = 0; q < st.neighbors.size(); ++q) {
    const auto& nb = st.neighbors[q];
    if (nb.empty()) continue;
    const double inv = 1.0 / static_cast<double>(nb.size());
    const auto& h = st.correlations[q];
    double* row = a.data() + q * s_count * d_in;
    for (std::size_t j = 0; j < nb.size(); ++j) {
      const double* fj = f.data() + nb[j] * d_in;
      for (std::size_t s = 0; s < s_count; ++s) {
        const double w = h[j * s_count + s] * inv;
        if (w == 0.0) continue;
        double* dst = row + s * d_in;
        for (std::size_t d = 0; d < d_in; ++d) dst[d] += w * fj[d];
      }
    }
  }
  return t.record(std::move(a), {features}, [features, &st](ad::Tape& tp, std::size_t self) {
    ad::Array* gf = tp.accum(features);
    if (!gf) return;
    const ad::Array& ga = tp.grad(self);
    const std::size_t d_in = gf->cols();
    const std::size_t s_count = st.kernel_count;
    for (std::size_t q = 0; q < st.neighbors.size(); ++q) {
      const auto& nb = st.neighbors[q];
      if (nb.empty()) continue;
      const double inv = 1.0 / static_cast<double>(nb.size());
      const auto& h = st.correlations[q];
      const double* grow = ga.data() + q * s_count * d_in;
      for (std::size_t j = 0; j < nb.size(); ++j) {
        double* gj = gf->data() + nb[j] * d_in;
        for (std::size_t s = 0; s < s_count; ++s) {
          const double w = h[j * s_count + s] * inv;
          if (w == 0.0) continue;
          const double* src = grow + s * d_in;
          for (std::size_t d = 0; d < d_in; ++d) gj[d] += w * src[d];
        }
      }
    }
  });
}

/// Kernel geometry plus one D_in x D_out weight matrix per kernel point.
struct KernelPointSet {
  std::vector<Vec3> points;
  double sigma = 0.0;
  double radius = 0.0;
  std::vector<ad::Parameter> weights;

  KernelPointSet() = default;
  KernelPointSet(const std::string& name, std::size_t count, double conv_radius, double sigma_,
                 std::size_t d_in, std::size_t d_out, std::uint64_t geometry_seed, std::mt19937_64& rng)
      : points(init_kernel_points(count, conv_radius, geometry_seed)), sigma(sigma_), radius(conv_radius) {
    weights.reserve(count);
    for (std::size_t s = 0; s < count; ++s) {
      weights.emplace_back(name + ".w" + std::to_string(s), ad::Array(d_in, d_out));
      ad::init_uniform_glorot(weights.back(), d_in, d_out, rng);
    }
  }

  std::size_t count() const { return points.size(); }

  void collect(std::vector<ad::Parameter*>& out) {
    for (auto& w : weights) out.push_back(&w);
  }
};

/// Ψ = A · [W_1; …; W_S] for a precomputed stencil.
inline ad::Var kpconv_forward(ad::Tape& t, ad::Var support_features, const ConvStencil& st,
                              KernelPointSet& kernel) {
  if (st.kernel_count != kernel.count()) throw ShapeError("kpconv: stencil/kernel count mismatch");
  const std::size_t d_in = t.value(support_features).cols();
  if (!kernel.weights.empty() && kernel.weights[0].value.rows() != d_in) {
    throw ShapeError("kpconv: feature width " + std::to_string(d_in) + " vs kernel weights " +
                     ad::shape_str(kernel.weights[0].value.shape()));
  }
  std::vector<ad::Var> ws;
  ws.reserve(kernel.count());
  for (auto& w : kernel.weights) ws.push_back(t.param(w));
  return ad::matmul(kernel_aggregate(support_features, st), ad::concat_rows(ws));
}

// ---------------------------------------------------------------------------
// Cross-attention block

/// Queries from the first input, keys/values from the second; multi-head
/// scaled dot-product attention, output projection, residual with a
/// projection of the query input, row layer norm, then a position-wise
/// feed-forward block with residual and row layer norm.
struct CrossAttention {
  std::size_t heads = 1;
  Linear query, key, value, output, residual, ff1, ff2;

  CrossAttention() = default;
  CrossAttention(const std::string& name, std::size_t d_in, std::size_t d_out, std::size_t heads_,
                 std::size_t ff_width, std::mt19937_64& rng)
      : heads(heads_),
        query(name + ".q", d_in, d_out, false, rng),
        key(name + ".k", d_in, d_out, false, rng),
        value(name + ".v", d_in, d_out, false, rng),
        output(name + ".o", d_out, d_out, false, rng),
        residual(name + ".r", d_in, d_out, false, rng),
        ff1(name + ".ff1", d_out, ff_width, true, rng),
        ff2(name + ".ff2", ff_width, d_out, true, rng) {
    if (heads == 0 || d_out % heads != 0) {
      throw ConfigError("attention width " + std::to_string(d_out) + " not divisible by " +
                        std::to_string(heads) + " heads");
    }
  }

  std::size_t in_dim() const { return query.in(); }
  std::size_t out_dim() const { return query.out(); }

  /// Attention weights of one head (rows sum to one); exposed for tests.
  ad::Var head_weights(ad::Var q, ad::Var k, std::size_t h) const {
    const std::size_t dh = out_dim() / heads;
    ad::Var scores = ad::matmul_nt(ad::slice_cols(q, h * dh, dh), ad::slice_cols(k, h * dh, dh));
    return ad::softmax_rows(ad::scalar_mul(scores, 1.0 / std::sqrt(static_cast<double>(dh))));
  }

  /// Concatenated per-head value mixtures, before the output projection.
  ad::Var mixture(ad::Tape& t, ad::Var fa, ad::Var fb) {
    check(t, fa, fb);
    const std::size_t dh = out_dim() / heads;
    ad::Var q = query(t, fa);
    ad::Var k = key(t, fb);
    ad::Var v = value(t, fb);
    std::vector<ad::Var> parts;
    parts.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      parts.push_back(ad::matmul(head_weights(q, k, h), ad::slice_cols(v, h * dh, dh)));
    }
    return heads == 1 ? parts[0] : ad::concat_cols(parts);
  }

  ad::Var forward(ad::Tape& t, ad::Var fa, ad::Var fb) {
    ad::Var attended = output(t, mixture(t, fa, fb));
    ad::Var h = ad::layer_norm_rows(ad::add(residual(t, fa), attended));
    ad::Var ff = ff2(t, ad::relu(ff1(t, h)));
    return ad::layer_norm_rows(ad::add(h, ff));
  }

  void collect(std::vector<ad::Parameter*>& out) {
    for (Linear* l : {&query, &key, &value, &output, &residual, &ff1, &ff2}) l->collect(out);
  }

  void zero() {
    for (Linear* l : {&query, &key, &value, &output, &residual, &ff1, &ff2}) l->zero();
  }

 private:
  void check(ad::Tape& t, ad::Var fa, ad::Var fb) const {
    const auto& a = t.value(fa);
    const auto& b = t.value(fb);
    if (a.cols() != in_dim() || b.cols() != in_dim()) {
      throw ShapeError("cross attention expects width " + std::to_string(in_dim()) + ", got " +
                       ad::shape_str(a.shape()) + " and " + ad::shape_str(b.shape()));
    }
  }
};

// ---------------------------------------------------------------------------
// Configuration

enum class InitialFeatures { coordinates, ones };

struct EncoderConfig {
  std::vector<std::size_t> channels{64, 128, 256, 512, 1024};
  double input_cell = 0.0;   // level-0 pre-subsampling; 0 keeps the input cloud
  double base_cell = 0.025;  // level-1 grid cell
  double cell_growth = 2.0;
  double radius_factor = 2.5;   // tau = radius_factor * cell
  double sigma_divisor = 2.5;   // sigma = tau / sigma_divisor
  std::size_t kernel_points = 15;
  std::size_t heads = 4;
  std::size_t ff_multiplier = 2;
  InitialFeatures initial = InitialFeatures::coordinates;
  std::vector<bool> transformer;  // per layer; empty = all enabled
  bool share_transformer = false;  // eta_1 == eta_2
  std::uint64_t seed = 1;

  std::size_t num_scales() const { return channels.size(); }
  std::size_t input_dim() const { return initial == InitialFeatures::ones ? 1 : 3; }
  std::size_t in_channels(std::size_t layer) const { return layer == 1 ? input_dim() : channels[layer - 2]; }
  std::size_t out_channels(std::size_t layer) const { return channels[layer - 1]; }
  double cell(std::size_t layer) const {
    return base_cell * std::pow(cell_growth, static_cast<double>(layer) - 1.0);
  }
  double radius(std::size_t layer) const { return radius_factor * cell(layer); }
  double sigma(std::size_t layer) const { return radius(layer) / sigma_divisor; }
  bool transformer_enabled(std::size_t layer) const {
    return transformer.empty() || transformer[layer - 1];
  }

  static EncoderConfig full_preset() { return EncoderConfig{}; }

  std::vector<std::string> validate() const {
    std::vector<std::string> errs;
    if (channels.empty()) errs.push_back("encoder.channels: at least one scale required");
    for (std::size_t i = 0; i < channels.size(); ++i) {
      if (channels[i] == 0) errs.push_back("encoder.channels: zero width");
      if (i > 0 && channels[i] < channels[i - 1]) errs.push_back("encoder.channels: must be nondecreasing");
      if (heads > 0 && channels[i] % heads != 0) {
        errs.push_back("encoder.channels: width " + std::to_string(channels[i]) + " not divisible by heads");
      }
    }
    if (!(base_cell > 0.0)) errs.push_back("encoder.base_cell: must be positive");
    if (input_cell < 0.0) errs.push_back("encoder.input_cell: must be nonnegative");
    if (!(cell_growth > 1.0)) errs.push_back("encoder.cell_growth: must exceed 1 (radii strictly increasing)");
    if (!(radius_factor > 0.0)) errs.push_back("encoder.radius_factor: must be positive");
    if (!(sigma_divisor > 0.0)) errs.push_back("encoder.sigma_divisor: must be positive");
    if (kernel_points < 2) errs.push_back("encoder.kernel_points: must be at least 2");
    if (heads == 0) errs.push_back("encoder.heads: must be positive");
    if (ff_multiplier == 0) errs.push_back("encoder.ff_multiplier: must be positive");
    if (!transformer.empty() && transformer.size() != channels.size()) {
      errs.push_back("encoder.transformer: one flag per scale required");
    }
    return errs;
  }

  /// Reads keys under [encoder]; unknown keys are ignored.
  static EncoderConfig from_config(const KeyValueConfig& kv, std::vector<std::string>& errs,
                                   EncoderConfig base) {
    EncoderConfig c = base;
    if (kv.has("encoder.channels")) {
      c.channels.clear();
      for (double v : kv.get_list("encoder.channels", {}, errs)) {
        if (v < 0 || v != std::floor(v)) {
          errs.push_back("encoder.channels: entries must be nonnegative integers");
          continue;
        }
        c.channels.push_back(static_cast<std::size_t>(v));
      }
    }
    c.input_cell = kv.get_double("encoder.input_cell", c.input_cell, errs);
    c.base_cell = kv.get_double("encoder.base_cell", c.base_cell, errs);
    c.cell_growth = kv.get_double("encoder.cell_growth", c.cell_growth, errs);
    c.radius_factor = kv.get_double("encoder.radius_factor", c.radius_factor, errs);
    c.sigma_divisor = kv.get_double("encoder.sigma_divisor", c.sigma_divisor, errs);
    c.kernel_points = static_cast<std::size_t>(
        std::max<long long>(0, kv.get_int("encoder.kernel_points", static_cast<long long>(c.kernel_points), errs)));
    c.heads = static_cast<std::size_t>(std::max<long long>(0, kv.get_int("encoder.heads", static_cast<long long>(c.heads), errs)));
    c.ff_multiplier = static_cast<std::size_t>(
        std::max<long long>(0, kv.get_int("encoder.ff_multiplier", static_cast<long long>(c.ff_multiplier), errs)));
    const std::string init = kv.get("encoder.initial_features", c.initial == InitialFeatures::ones ? "ones" : "coordinates");
    if (init == "ones") {
      c.initial = InitialFeatures::ones;
    } else if (init == "coordinates") {
      c.initial = InitialFeatures::coordinates;
    } else {
      errs.push_back("encoder.initial_features: expected 'coordinates' or 'ones'");
    }
    if (kv.has("encoder.transformer")) {
      c.transformer.clear();
      for (double v : kv.get_list("encoder.transformer", {}, errs)) c.transformer.push_back(v != 0.0);
    }
    c.share_transformer = kv.get_bool("encoder.share_transformer", c.share_transformer, errs);
    c.seed = static_cast<std::uint64_t>(kv.get_int("encoder.seed", static_cast<long long>(c.seed), errs));
    return c;
  }
};

// ---------------------------------------------------------------------------
// Pyramid geometry

/// Subsampled levels of one cloud plus the convolution stencils that connect
/// them. levels[0] is the encoder input; pick[l] lists the level-(l-1)
/// indices that form level l.
struct CloudLevels {
  std::vector<PointCloud> levels;
  std::vector<std::vector<std::size_t>> pick;
  std::vector<ConvStencil> stencils;  // stencils[l] for l >= 1
  std::vector<std::size_t> input_index;  // level-0 row -> input cloud index
};

/// Trainable encoder: L layers, each with a kernel-point convolution and a
/// pair of cross-attention blocks.
struct EncoderLayer {
  KernelPointSet conv;
  std::optional<CrossAttention> eta1, eta2;
};

class Encoder {
 public:
  explicit Encoder(EncoderConfig cfg) : cfg_(std::move(cfg)) {
    if (auto errs = cfg_.validate(); !errs.empty()) throw ConfigError(errs.front());
    std::mt19937_64 rng(cfg_.seed);
    layers_.reserve(cfg_.num_scales());
    for (std::size_t l = 1; l <= cfg_.num_scales(); ++l) {
      const std::string name = "enc.l" + std::to_string(l);
      const std::size_t din = cfg_.in_channels(l), dout = cfg_.out_channels(l);
      EncoderLayer layer;
      layer.conv = KernelPointSet(name + ".conv", cfg_.kernel_points, cfg_.radius(l), cfg_.sigma(l), din,
                                  dout, cfg_.seed * 7919 + l, rng);
      if (cfg_.transformer_enabled(l)) {
        // eta_1 and eta_2 are separate parameters drawn from the same seed.
        const std::uint64_t eta_seed = cfg_.seed * 1000003 + l;
        std::mt19937_64 rng1(eta_seed);
        layer.eta1.emplace(name + ".eta1", din, dout, cfg_.heads, cfg_.ff_multiplier * dout, rng1);
        if (!cfg_.share_transformer) {
          std::mt19937_64 rng2(eta_seed);
          layer.eta2.emplace(name + ".eta2", din, dout, cfg_.heads, cfg_.ff_multiplier * dout, rng2);
        }
      }
      layers_.push_back(std::move(layer));
    }
  }

  Encoder(const Encoder&) = delete;
  Encoder& operator=(const Encoder&) = delete;

  const EncoderConfig& config() const { return cfg_; }
  std::size_t num_layers() const { return layers_.size(); }
  EncoderLayer& layer(std::size_t l) { return layers_.at(l - 1); }

  void collect(std::vector<ad::Parameter*>& out) {
    for (auto& layer : layers_) {
      layer.conv.collect(out);
      if (layer.eta1) layer.eta1->collect(out);
      if (layer.eta2) layer.eta2->collect(out);
    }
  }

  /// Builds levels 0..L by successive voxel-representative subsampling.
  CloudLevels build_levels(const PointCloud& cloud) const {
    if (cloud.empty()) throw PyramidCollapseError(0);
    CloudLevels lv;
    if (cfg_.input_cell > 0.0) {
      lv.input_index = grid_subsample_indices(cloud, cfg_.input_cell);
      lv.levels.push_back(select_points(cloud, lv.input_index));
    } else {
      lv.input_index.resize(cloud.size());
      for (std::size_t i = 0; i < cloud.size(); ++i) lv.input_index[i] = i;
      lv.levels.push_back(PointCloud(cloud.points));
    }
    lv.pick.emplace_back();
    lv.stencils.emplace_back();
    for (std::size_t l = 1; l <= cfg_.num_scales(); ++l) {
      const PointCloud& prev = lv.levels.back();
      auto idx = grid_subsample_indices(prev, cfg_.cell(l));
      if (idx.empty()) throw PyramidCollapseError(static_cast<int>(l));
      PointCloud next = select_points(prev, idx);
      const KdTree tree(prev.points);
      const auto& k = layers_[l - 1].conv;
      lv.stencils.push_back(build_stencil(next.points, prev.points, tree, k.radius, k.points, k.sigma));
      lv.pick.push_back(std::move(idx));
      lv.levels.push_back(std::move(next));
    }
    return lv;
  }

  ad::Array initial_features(const PointCloud& level0) const {
    if (cfg_.initial == InitialFeatures::ones) return ad::Array(level0.size(), 1, 1.0);
    ad::Array f(level0.size(), 3);
    for (std::size_t i = 0; i < level0.size(); ++i) {
      for (int c = 0; c < 3; ++c) f(i, static_cast<std::size_t>(c)) = level0.points[i][c];
    }
    return f;
  }

  /// One layer for both clouds: F^l = Ψ + Φ restricted to level l. The
  /// attention blocks are evaluated only on the query rows that survive
  /// subsampling; rows are independent, so this equals attending with all
  /// rows and selecting afterwards.
  std::pair<ad::Var, ad::Var> layer_forward(ad::Tape& t, std::size_t l, ad::Var fx, ad::Var fy,
                                            const CloudLevels& gx, const CloudLevels& gy) {
    EncoderLayer& layer = layers_.at(l - 1);
    ad::Var psi_x = kpconv_forward(t, fx, gx.stencils[l], layer.conv);
    ad::Var psi_y = kpconv_forward(t, fy, gy.stencils[l], layer.conv);
    if (!layer.eta1) return {psi_x, psi_y};
    CrossAttention& eta2 = layer.eta2 ? *layer.eta2 : *layer.eta1;
    ad::Var phi_x = layer.eta1->forward(t, ad::gather_rows(fx, gx.pick[l]), fy);
    ad::Var phi_y = eta2.forward(t, ad::gather_rows(fy, gy.pick[l]), fx);
    return {ad::add(psi_x, phi_x), ad::add(psi_y, phi_y)};
  }

  /// Features for levels 0..L of both clouds.
  std::pair<std::vector<ad::Var>, std::vector<ad::Var>> forward(ad::Tape& t, const CloudLevels& gx,
                                                                const CloudLevels& gy) {
    std::vector<ad::Var> fx{t.constant(initial_features(gx.levels[0]))};
    std::vector<ad::Var> fy{t.constant(initial_features(gy.levels[0]))};
    for (std::size_t l = 1; l <= num_layers(); ++l) {
      auto [nx, ny] = layer_forward(t, l, fx.back(), fy.back(), gx, gy);
      fx.push_back(nx);
      fy.push_back(ny);
    }
    return {std::move(fx), std::move(fy)};
  }

 private:
  EncoderConfig cfg_;
  std::vector<EncoderLayer> layers_;
};

/// Per-scale point sets and feature maps for a cloud pair (levels 1..L in
/// slots 1..L; slot 0 holds the encoder input).
struct EncoderPyramid {
  CloudLevels source, target;
  std::vector<ad::Array> source_features, target_features;
};

inline EncoderPyramid encode_pyramid(Encoder& enc, const PointCloud& source, const PointCloud& target) {
  if (source.empty() || target.empty()) throw Error("encode_pyramid: clouds must be non-empty");
  EncoderPyramid out;
  out.source = enc.build_levels(source);
  out.target = enc.build_levels(target);
  ad::Tape t;
  auto [fx, fy] = enc.forward(t, out.source, out.target);
  for (auto v : fx) out.source_features.push_back(t.value(v));
  for (auto v : fy) out.target_features.push_back(t.value(v));
  return out;
}

}  // namespace edfnet
