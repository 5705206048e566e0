#pragma once

// Full descriptor network: encoder, per-scale upsampling and unification,
// then fusion into one descriptor per requested input point.

#include <deque>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "edfnet/encoder.hpp"
#include "edfnet/fusion.hpp"
#include "edfnet/geometry.hpp"
#include "edfnet/tensor.hpp"

namespace edfnet {

/// Geometry shared by one forward pass over a cloud pair. IDW stencils are
/// referenced by tape closures, so the context must outlive backward().
struct PairContext {
  const PointCloud* source = nullptr;
  const PointCloud* target = nullptr;
  CloudLevels source_levels, target_levels;
  std::deque<IdwStencil> idw;
};

struct PairOutput {
  ad::Var source, target;                            // n x v descriptors
  ad::Var source_coefficients, target_coefficients;  // n x L
  std::vector<ad::Var> source_scales, target_scales;  // Γ^l rows, for diagnostics
};

class Network {
 public:
  Network(EncoderConfig enc, FusionConfig fusion) : encoder_(std::move(enc)), fusion_(fusion) {
    if (auto errs = fusion_.validate(); !errs.empty()) throw ConfigError(errs.front());
    std::mt19937_64 rng(encoder_.config().seed * 104729 + 17);
    for (std::size_t l = 1; l <= encoder_.num_layers(); ++l) {
      unify_.emplace_back("unify.l" + std::to_string(l), encoder_.config().out_channels(l), fusion_.width, rng);
    }
  }

  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  Encoder& encoder() { return encoder_; }
  const FusionConfig& fusion() const { return fusion_; }
  void set_fusion_mode(FusionMode m) { fusion_.mode = m; }
  UnifyMlp& unify(std::size_t l) { return unify_.at(l - 1); }
  std::size_t num_scales() const { return unify_.size(); }

  std::vector<ad::Parameter*> parameters() {
    std::vector<ad::Parameter*> out;
    encoder_.collect(out);
    for (auto& u : unify_) u.collect(out);
    return out;
  }

  PairContext prepare(const PointCloud& source, const PointCloud& target) const {
    PairContext ctx;
    ctx.source = &source;
    ctx.target = &target;
    ctx.source_levels = encoder_.build_levels(source);
    ctx.target_levels = encoder_.build_levels(target);
    return ctx;
  }

  /// Descriptors for the given input-cloud rows of each cloud.
  PairOutput forward(ad::Tape& t, PairContext& ctx, std::span<const std::size_t> source_rows,
                     std::span<const std::size_t> target_rows) {
    auto [fx, fy] = encoder_.forward(t, ctx.source_levels, ctx.target_levels);
    PairOutput out;
    out.source_scales = dense_scales(t, ctx, fx, ctx.source_levels, *ctx.source, source_rows);
    out.target_scales = dense_scales(t, ctx, fy, ctx.target_levels, *ctx.target, target_rows);
    std::tie(out.source, out.source_coefficients) = fuse(t, out.source_scales);
    std::tie(out.target, out.target_coefficients) = fuse(t, out.target_scales);
    if (fusion_.normalize_descriptors) {
      out.source = normalize_rows(out.source);
      out.target = normalize_rows(out.target);
    }
    return out;
  }

  /// Inference over all points of both clouds (or the given rows).
  std::pair<DescriptorSet, DescriptorSet> describe(const PointCloud& source, const PointCloud& target,
                                                   std::optional<std::vector<std::size_t>> source_rows = {},
                                                   std::optional<std::vector<std::size_t>> target_rows = {}) {
    PairContext ctx = prepare(source, target);
    const auto rx = source_rows ? *source_rows : all_rows(source.size());
    const auto ry = target_rows ? *target_rows : all_rows(target.size());
    ad::Tape t;
    PairOutput out = forward(t, ctx, rx, ry);
    return {DescriptorSet{t.value(out.source), t.value(out.source_coefficients)},
            DescriptorSet{t.value(out.target), t.value(out.target_coefficients)}};
  }

  static std::vector<std::size_t> all_rows(std::size_t n) {
    std::vector<std::size_t> r(n);
    for (std::size_t i = 0; i < n; ++i) r[i] = i;
    return r;
  }

 private:
  std::vector<ad::Var> dense_scales(ad::Tape& t, PairContext& ctx, const std::vector<ad::Var>& features,
                                    const CloudLevels& levels, const PointCloud& input,
                                    std::span<const std::size_t> rows) {
    std::vector<Vec3> dense(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) dense[k] = input.points.at(rows[k]);
    std::vector<ad::Var> out;
    for (std::size_t l = 1; l <= encoder_.num_layers(); ++l) {
      const KdTree tree(levels.levels[l].points);
      ctx.idw.push_back(build_idw(dense, tree, fusion_.idw_neighbors, fusion_.idw_power));
      ad::Var up = idw_apply(features[l], ctx.idw.back());
      ad::Var g = unify_[l - 1](t, up);
      if (fusion_.normalize_scales) g = normalize_rows(g);
      out.push_back(g);
    }
    return out;
  }

  std::pair<ad::Var, ad::Var> fuse(ad::Tape& t, const std::vector<ad::Var>& scales) {
    if (fusion_.mode == FusionMode::add) {
      const std::size_t n = t.value(scales[0]).rows();
      return {add_fuse(scales), t.constant(ad::Array(n, scales.size(), 1.0 / static_cast<double>(scales.size())))};
    }
    return dynamic_fuse(t, scales, fusion_.iterations);
  }

  Encoder encoder_;
  FusionConfig fusion_;
  std::vector<UnifyMlp> unify_;
};

}  // namespace edfnet
