#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "edfnet/encoder.hpp"
#include "edfnet/synthetic.hpp"

using namespace edfnet;
using ad::Array;

namespace {

std::vector<Vec3> random_points(std::size_t n, double extent, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, extent);
  std::vector<Vec3> pts(n);
  for (auto& p : pts) p = Vec3(u(rng), u(rng), u(rng));
  return pts;
}

Array random_array(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Array a(r, c);
  for (auto& v : a.values()) v = g(rng);
  return a;
}

Eigen::MatrixXd to_eigen(const Array& a) {
  Eigen::MatrixXd m(a.rows(), a.cols());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) m(r, c) = a(r, c);
  return m;
}

EncoderConfig small_config() {
  EncoderConfig c;
  c.channels = {4, 8};
  c.base_cell = 0.1;
  c.kernel_points = 5;
  c.heads = 2;
  c.seed = 7;
  return c;
}

PointCloud random_cloud(std::size_t n, std::uint64_t seed) { return PointCloud(random_points(n, 0.5, seed)); }

}  // namespace

TEST(KernelCorrelation, HatFunction) {
  const Vec3 k(0.1, 0.2, 0.3);
  EXPECT_EQ(kernel_correlation(k, k, 0.5), 1.0);
  EXPECT_EQ(kernel_correlation(k + Vec3(0.5, 0, 0), k, 0.5), 0.0);
  EXPECT_NEAR(kernel_correlation(k + Vec3(0, 0.25, 0), k, 0.5), 0.5, 1e-15);
  EXPECT_EQ(kernel_correlation(k + Vec3(0, 0, 2.0), k, 0.5), 0.0);
}

TEST(KernelPoints, TwoPoints) {
  const auto pts = init_kernel_points(2, 1.5, 3);
  ASSERT_EQ(pts.size(), 2u);
  EXPECT_EQ(pts[0], Vec3::Zero());
  EXPECT_NEAR(pts[1].norm(), 1.5 * 0.66, 1e-12);
  EXPECT_THROW(init_kernel_points(1, 1.0, 3), Error);
}

TEST(KernelPoints, FifteenAreWellSpread) {
  const double radius = 1.0;
  const auto pts = init_kernel_points(15, radius, 1);
  const double shell = 0.66 * radius;
  double min_d = 1e9;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    EXPECT_NEAR(pts[i].norm(), shell, 1e-12);
    EXPECT_LE(pts[i].norm(), radius);
    for (std::size_t j = i + 1; j < pts.size(); ++j) min_d = std::min(min_d, (pts[i] - pts[j]).norm());
  }
  // Mean chord between uniform points on a sphere of radius R is 4R/3.
  const double uniform_mean = 4.0 * shell / 3.0;
  EXPECT_GT(min_d, 0.5 * uniform_mean);
  // Regression baseline measured after relaxation.
  EXPECT_GT(min_d, 0.85 * shell);
}

TEST(KernelPoints, ShellCentroidNearOrigin) {
  for (std::size_t s : {3u, 5u, 8u, 15u, 20u}) {
    const auto pts = init_kernel_points(s, 2.0, 11);
    Vec3 c = Vec3::Zero();
    for (std::size_t i = 1; i < pts.size(); ++i) c += pts[i];
    c /= static_cast<double>(pts.size() - 1);
    EXPECT_LT(c.norm(), 1e-3 * 2.0) << "S=" << s;
  }
}

TEST(KernelPoints, Deterministic) { EXPECT_EQ(init_kernel_points(15, 1.0, 4), init_kernel_points(15, 1.0, 4)); }

TEST(KpConv, SingleSupportIdentity) {
  const std::vector<Vec3> q{Vec3(0.3, 0.3, 0.3)};
  const KdTree tree(q);
  const std::vector<Vec3> kp{Vec3::Zero()};
  const ConvStencil st = build_stencil(q, q, tree, 0.5, kp, 0.2);
  KernelPointSet k;
  k.points = kp;
  k.sigma = 0.2;
  k.radius = 0.5;
  k.weights.emplace_back("w", Array::from_rows(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  ad::Tape t;
  const Array& psi = t.value(kpconv_forward(t, t.constant(Array::from_rows(1, 3, {1, 0, 0})), st, k));
  EXPECT_EQ(psi(0, 0), 1.0);
  EXPECT_EQ(psi(0, 1), 0.0);
  EXPECT_EQ(psi(0, 2), 0.0);
}

namespace {

// Direct sum over queries, neighbors and kernel points.
Eigen::MatrixXd kpconv_oracle(const std::vector<Vec3>& queries, const std::vector<Vec3>& support,
                              const Eigen::MatrixXd& f, const KernelPointSet& k) {
  const auto dout = static_cast<Eigen::Index>(k.weights[0].value.cols());
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(queries.size()), dout);
  for (std::size_t q = 0; q < queries.size(); ++q) {
    std::vector<std::size_t> nb;
    for (std::size_t j = 0; j < support.size(); ++j)
      if ((support[j] - queries[q]).norm() <= k.radius) nb.push_back(j);
    if (nb.empty()) continue;
    for (auto j : nb) {
      for (std::size_t s = 0; s < k.count(); ++s) {
        const double h = std::max(0.0, 1.0 - ((support[j] - queries[q]) - k.points[s]).norm() / k.sigma);
        out.row(static_cast<Eigen::Index>(q)) +=
            h * f.row(static_cast<Eigen::Index>(j)) * to_eigen(k.weights[s].value);
      }
    }
    out.row(static_cast<Eigen::Index>(q)) /= static_cast<double>(nb.size());
  }
  return out;
}

}  // namespace

TEST(KpConv, MatchesTripleLoopOracle) {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const auto support = random_points(30, 0.2, seed);
    const auto queries = random_points(seed * 25, 0.2, seed + 100);  // up to 100 queries
    std::mt19937_64 rng(seed);
    KernelPointSet k("k", 15, 0.15, 0.06, 5, 7, seed, rng);
    const KdTree tree(support);
    const ConvStencil st = build_stencil(queries, support, tree, k.radius, k.points, k.sigma);
    const Array f = random_array(support.size(), 5, seed + 7);
    ad::Tape t;
    const Eigen::MatrixXd got = to_eigen(t.value(kpconv_forward(t, t.constant(f), st, k)));
    const Eigen::MatrixXd want = kpconv_oracle(queries, support, to_eigen(f), k);
    EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(KpConv, DuplicatedSupportIsInvariant) {
  const auto support = random_points(40, 0.2, 5);
  const auto queries = random_points(20, 0.2, 6);
  std::mt19937_64 rng(1);
  KernelPointSet k("k", 15, 0.12, 0.05, 3, 4, 1, rng);
  const Array f = random_array(support.size(), 3, 8);

  std::vector<Vec3> doubled = support;
  doubled.insert(doubled.end(), support.begin(), support.end());
  Array f2(2 * support.size(), 3);
  for (std::size_t r = 0; r < 2 * support.size(); ++r)
    for (std::size_t c = 0; c < 3; ++c) f2(r, c) = f(r % support.size(), c);

  const ConvStencil a = build_stencil(queries, support, KdTree(support), k.radius, k.points, k.sigma);
  const ConvStencil b = build_stencil(queries, doubled, KdTree(doubled), k.radius, k.points, k.sigma);
  ad::Tape t;
  const Eigen::MatrixXd ya = to_eigen(t.value(kpconv_forward(t, t.constant(f), a, k)));
  const Eigen::MatrixXd yb = to_eigen(t.value(kpconv_forward(t, t.constant(f2), b, k)));
  EXPECT_LT((ya - yb).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(KpConv, EmptyNeighborhoodGivesZeroRowAndIsReported) {
  const std::vector<Vec3> support{Vec3(0, 0, 0)};
  const std::vector<Vec3> queries{Vec3(0, 0, 0), Vec3(5, 5, 5)};
  std::mt19937_64 rng(1);
  KernelPointSet k("k", 3, 0.5, 0.2, 2, 2, 1, rng);
  const ConvStencil st = build_stencil(queries, support, KdTree(support), k.radius, k.points, k.sigma);
  ASSERT_EQ(st.empty_queries.size(), 1u);
  EXPECT_EQ(st.empty_queries[0], 1u);
  ad::Tape t;
  const Array& y = t.value(kpconv_forward(t, t.constant(Array(1, 2, 1.0)), st, k));
  EXPECT_EQ(y(1, 0), 0.0);
  EXPECT_EQ(y(1, 1), 0.0);
}

TEST(Attention, SingleKeyHasUnitWeights) {
  std::mt19937_64 rng(2);
  CrossAttention att("a", 6, 8, 2, 16, rng);
  ad::Tape t;
  const auto q = att.query(t, t.constant(random_array(5, 6, 1)));
  const auto k = att.key(t, t.constant(random_array(1, 6, 2)));
  for (std::size_t h = 0; h < 2; ++h)
    for (double w : t.value(att.head_weights(q, k, h)).values()) EXPECT_EQ(w, 1.0);
}

TEST(Attention, IdenticalKeyRowsGiveIdenticalMixture) {
  std::mt19937_64 rng(3);
  CrossAttention att("a", 4, 8, 4, 16, rng);
  const Array row = random_array(1, 4, 5);
  Array fb(6, 4);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 4; ++c) fb(r, c) = row(0, c);
  ad::Tape t;
  const Array& m = t.value(att.mixture(t, t.constant(random_array(7, 4, 6)), t.constant(fb)));
  for (std::size_t r = 1; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) EXPECT_NEAR(m(r, c), m(0, c), 1e-14);
}

namespace {

Eigen::MatrixXd layer_norm_oracle(Eigen::MatrixXd x) {
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    x.row(r) = (x.row(r).array() - mu) / std::sqrt(var + 1e-5);
  }
  return x;
}

// Per-head loops with explicit softmax.
Eigen::MatrixXd attention_oracle(const CrossAttention& att, const Eigen::MatrixXd& fa, const Eigen::MatrixXd& fb) {
  const Eigen::MatrixXd q = fa * to_eigen(att.query.weight.value);
  const Eigen::MatrixXd k = fb * to_eigen(att.key.weight.value);
  const Eigen::MatrixXd v = fb * to_eigen(att.value.weight.value);
  const Eigen::Index d = q.cols();
  const Eigen::Index dh = d / static_cast<Eigen::Index>(att.heads);
  Eigen::MatrixXd mix = Eigen::MatrixXd::Zero(fa.rows(), d);
  for (Eigen::Index h = 0; h < static_cast<Eigen::Index>(att.heads); ++h) {
    for (Eigen::Index i = 0; i < fa.rows(); ++i) {
      std::vector<double> s(static_cast<std::size_t>(fb.rows()));
      double mx = -1e300;
      for (Eigen::Index j = 0; j < fb.rows(); ++j) {
        double dot = 0.0;
        for (Eigen::Index c = 0; c < dh; ++c) dot += q(i, h * dh + c) * k(j, h * dh + c);
        s[static_cast<std::size_t>(j)] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[static_cast<std::size_t>(j)]);
      }
      double z = 0.0;
      for (auto& x : s) z += (x = std::exp(x - mx));
      for (Eigen::Index j = 0; j < fb.rows(); ++j)
        for (Eigen::Index c = 0; c < dh; ++c) mix(i, h * dh + c) += s[static_cast<std::size_t>(j)] / z * v(j, h * dh + c);
    }
  }
  const Eigen::MatrixXd attended = mix * to_eigen(att.output.weight.value);
  const Eigen::MatrixXd h1 = layer_norm_oracle(fa * to_eigen(att.residual.weight.value) + attended);
  Eigen::MatrixXd hidden = h1 * to_eigen(att.ff1.weight.value);
  hidden.rowwise() += to_eigen(att.ff1.bias.value).row(0);
  hidden = hidden.cwiseMax(0.0);
  Eigen::MatrixXd ff = hidden * to_eigen(att.ff2.weight.value);
  ff.rowwise() += to_eigen(att.ff2.bias.value).row(0);
  return layer_norm_oracle(h1 + ff);
}

}  // namespace

TEST(Attention, MatchesNaivePerHeadOracle) {
  std::mt19937_64 rng(4);
  CrossAttention att("a", 16, 16, 2, 32, rng);
  for (Linear* l : {&att.ff1, &att.ff2}) {
    std::mt19937_64 brng(9);
    std::uniform_real_distribution<double> u(-0.3, 0.3);
    for (auto& b : l->bias.value.values()) b = u(brng);
  }
  const Array fa = random_array(8, 16, 1);
  const Array fb = random_array(6, 16, 2);
  ad::Tape t;
  const Eigen::MatrixXd got = to_eigen(t.value(att.forward(t, t.constant(fa), t.constant(fb))));
  const Eigen::MatrixXd want = attention_oracle(att, to_eigen(fa), to_eigen(fb));
  EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Attention, WeightRowsSumToOne) {
  std::mt19937_64 rng(5);
  CrossAttention att("a", 8, 12, 3, 24, rng);
  ad::Tape t;
  const auto q = att.query(t, t.constant(random_array(9, 8, 1)));
  const auto k = att.key(t, t.constant(random_array(13, 8, 2)));
  for (std::size_t h = 0; h < 3; ++h) {
    const Array& w = t.value(att.head_weights(q, k, h));
    for (std::size_t r = 0; r < w.rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < w.cols(); ++c) s += w(r, c);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Attention, WidthMismatchIsShapeError) {
  std::mt19937_64 rng(5);
  CrossAttention att("a", 8, 12, 3, 24, rng);
  ad::Tape t;
  EXPECT_THROW(att.forward(t, t.constant(Array(3, 8)), t.constant(Array(3, 7))), ShapeError);
  EXPECT_THROW(CrossAttention("b", 8, 10, 3, 24, rng), ConfigError);
}

TEST(EncoderLayer, ZeroedBranchesLeaveTheOther) {
  const PointCloud x = random_cloud(64, 1), y = random_cloud(64, 2);
  auto run = [&](bool zero_attention, bool zero_conv) {
    Encoder enc(small_config());
    if (zero_attention) {
      enc.layer(1).eta1->zero();
      enc.layer(1).eta2->zero();
    }
    if (zero_conv)
      for (auto& w : enc.layer(1).conv.weights) w.value.fill(0.0);
    const auto gx = enc.build_levels(x), gy = enc.build_levels(y);
    ad::Tape t;
    const auto fx = t.constant(enc.initial_features(gx.levels[0]));
    const auto fy = t.constant(enc.initial_features(gy.levels[0]));
    auto [nx, ny] = enc.layer_forward(t, 1, fx, fy, gx, gy);
    const Array psi = t.value(kpconv_forward(t, fx, gx.stencils[1], enc.layer(1).conv));
    const Array phi = t.value(enc.layer(1).eta1->forward(t, ad::gather_rows(fx, gx.pick[1]), fy));
    return std::tuple{t.value(nx), psi, phi};
  };
  {
    auto [out, psi, phi] = run(true, false);
    // A zeroed block still layer-normalizes; its output is exactly zero.
    for (double v : phi.values()) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(out, psi);
  }
  {
    auto [out, psi, phi] = run(false, true);
    for (double v : psi.values()) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(out, phi);
  }
}

TEST(EncoderLayer, GradientsMatchFiniteDifferences) {
  const PointCloud x = random_cloud(64, 3), y = random_cloud(64, 4);
  Encoder enc(small_config());
  const auto gx = enc.build_levels(x), gy = enc.build_levels(y);
  const Array rx = random_array(gx.levels[1].size(), 4, 10);
  const Array ry = random_array(gy.levels[1].size(), 4, 11);
  auto loss = [&](ad::Tape& t) {
    const auto fx = t.constant(enc.initial_features(gx.levels[0]));
    const auto fy = t.constant(enc.initial_features(gy.levels[0]));
    auto [nx, ny] = enc.layer_forward(t, 1, fx, fy, gx, gy);
    return ad::add(ad::sum(ad::mul(nx, t.constant(rx))), ad::sum(ad::mul(ny, t.constant(ry))));
  };
  std::vector<ad::Parameter*> params;
  enc.collect(params);
  std::size_t checked = 0;
  for (ad::Parameter* p : params) {
    if (p->name.rfind("enc.l1", 0) != 0) continue;
    ad::FdOptions opts;
    opts.max_components = 12;
    opts.seed = checked;
    EXPECT_LT(ad::finite_difference_check(loss, *p, 1e-6, opts), 1e-4) << p->name;
    ++checked;
  }
  EXPECT_GT(checked, 15u);
}

TEST(EncoderLayer, EveryParameterGetsGradient) {
  const PointCloud x = random_cloud(150, 5), y = random_cloud(150, 6);
  Encoder enc(small_config());
  const auto gx = enc.build_levels(x), gy = enc.build_levels(y);
  ad::Tape t;
  auto [fx, fy] = enc.forward(t, gx, gy);
  const Array rx = random_array(t.value(fx.back()).rows(), 8, 1);
  const Array ry = random_array(t.value(fy.back()).rows(), 8, 2);
  t.backward(ad::add(ad::sum(ad::mul(fx.back(), t.constant(rx))), ad::sum(ad::mul(fy.back(), t.constant(ry)))));
  std::vector<ad::Parameter*> params;
  enc.collect(params);
  for (auto* p : params) {
    double norm = 0.0;
    for (double g : p->grad.values()) norm += g * g;
    EXPECT_GT(norm, 0.0) << p->name;
  }
}

TEST(Pyramid, LevelsAreNestedSubsets) {
  Encoder enc(small_config());
  const auto lv = enc.build_levels(random_cloud(300, 9));
  ASSERT_EQ(lv.levels.size(), 3u);
  for (std::size_t l = 1; l < lv.levels.size(); ++l) {
    ASSERT_EQ(lv.pick[l].size(), lv.levels[l].size());
    for (std::size_t i = 0; i < lv.pick[l].size(); ++i)
      EXPECT_EQ(lv.levels[l].points[i], lv.levels[l - 1].points[lv.pick[l][i]]);
  }
}

TEST(Pyramid, IdenticalCloudsGiveIdenticalFeatures) {
  Encoder enc(small_config());
  const PointCloud c = random_cloud(120, 10);
  const auto p = encode_pyramid(enc, c, c);
  for (std::size_t l = 0; l < p.source_features.size(); ++l) EXPECT_EQ(p.source_features[l], p.target_features[l]);
}

TEST(Pyramid, PermutingSourcePermutesRows) {
  Encoder enc(small_config());
  const PointCloud x = random_cloud(150, 11), y = random_cloud(140, 12);
  std::vector<Vec3> shuffled = x.points;
  std::mt19937_64 rng(3);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const auto a = encode_pyramid(enc, x, y);
  const auto b = encode_pyramid(enc, PointCloud(shuffled), y);
  auto key = [](const Vec3& p) { return std::tuple{p.x(), p.y(), p.z()}; };
  for (std::size_t l = 1; l < a.source_features.size(); ++l) {
    std::map<std::tuple<double, double, double>, std::size_t> row_of;
    for (std::size_t i = 0; i < b.source.levels[l].size(); ++i) row_of[key(b.source.levels[l].points[i])] = i;
    ASSERT_EQ(row_of.size(), a.source.levels[l].size());
    for (std::size_t i = 0; i < a.source.levels[l].size(); ++i) {
      const auto it = row_of.find(key(a.source.levels[l].points[i]));
      ASSERT_NE(it, row_of.end());
      for (std::size_t c = 0; c < a.source_features[l].cols(); ++c)
        EXPECT_NEAR(a.source_features[l](i, c), b.source_features[l](it->second, c), 1e-9);
    }
    double worst = 0.0;
    for (std::size_t k = 0; k < a.target_features[l].size(); ++k)
      worst = std::max(worst, std::abs(a.target_features[l][k] - b.target_features[l][k]));
    EXPECT_LT(worst, 1e-9);
  }
}

TEST(Pyramid, SwapWithSharedAttention) {
  EncoderConfig cfg = small_config();
  cfg.share_transformer = true;
  Encoder enc(cfg);
  const PointCloud x = random_cloud(100, 13), y = random_cloud(90, 14);
  const auto a = encode_pyramid(enc, x, y);
  const auto b = encode_pyramid(enc, y, x);
  for (std::size_t l = 0; l < a.source_features.size(); ++l) {
    EXPECT_EQ(a.source_features[l], b.target_features[l]);
    EXPECT_EQ(a.target_features[l], b.source_features[l]);
  }
}

TEST(Pyramid, DefaultPresetShapes) {
  const EncoderConfig cfg = EncoderConfig::full_preset();
  Encoder enc(cfg);
  SyntheticPairSpec spec;
  spec.points = 2000;
  const SyntheticPair pair = generate_pair(spec, 5);
  const auto p = encode_pyramid(enc, pair.source, pair.target);
  const std::vector<std::size_t> channels{64, 128, 256, 512, 1024};
  ASSERT_EQ(p.source_features.size(), 6u);
  for (std::size_t l = 1; l <= 5; ++l) {
    EXPECT_EQ(p.source_features[l].cols(), channels[l - 1]);
    EXPECT_EQ(p.target_features[l].cols(), channels[l - 1]);
    EXPECT_EQ(p.source_features[l].rows(), p.source.levels[l].size());
    EXPECT_EQ(p.target_features[l].rows(), p.target.levels[l].size());
    EXPECT_LE(p.source.levels[l].size(), p.source.levels[l - 1].size());
  }
}

TEST(Pyramid, EmptyCloudCollapses) {
  Encoder enc(small_config());
  try {
    enc.build_levels(PointCloud{});
    FAIL() << "expected a collapse error";
  } catch (const PyramidCollapseError& e) {
    EXPECT_EQ(e.layer(), 0);
  }
  EXPECT_THROW(encode_pyramid(enc, PointCloud{}, random_cloud(10, 1)), Error);
}

TEST(EncoderConfigTest, Validation) {
  EncoderConfig c = small_config();
  EXPECT_TRUE(c.validate().empty());
  c.channels = {8, 4};
  EXPECT_FALSE(c.validate().empty());
  c = small_config();
  c.kernel_points = 1;
  EXPECT_FALSE(c.validate().empty());
  EXPECT_THROW(Encoder{c}, ConfigError);
  const EncoderConfig p = EncoderConfig::full_preset();
  for (std::size_t l = 2; l <= p.num_scales(); ++l) EXPECT_GT(p.radius(l), p.radius(l - 1));
}
