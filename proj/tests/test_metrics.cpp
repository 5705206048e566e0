#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "edfnet/evaluation.hpp"
#include "edfnet/metrics.hpp"

using namespace edfnet;
using ad::Array;

namespace {

std::vector<Vec3> random_points(std::size_t n, double extent, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-extent, extent);
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

RigidTransform some_transform() {
  return RigidTransform{axis_angle_rotation(Vec3(1.0, -0.3, 0.5), 0.9), Vec3(0.4, 0.1, -0.3)};
}

MatchSet identity_matches(std::size_t n) {
  MatchSet m;
  for (std::size_t i = 0; i < n; ++i) {
    m.pairs.emplace_back(i, i);
    m.distances.push_back(0.0);
  }
  return m;
}

std::vector<Vec3> transformed(const RigidTransform& t, const std::vector<Vec3>& pts) {
  std::vector<Vec3> out;
  for (const auto& p : pts) out.push_back(t.apply(p));
  return out;
}

}  // namespace

TEST(NnMatch, IdenticalDescriptorsMatchIdentity) {
  const Array d = random_array(40, 8, 1);
  const MatchSet m = nn_match(d, d);
  for (std::size_t i = 0; i < 40; ++i) {
    EXPECT_EQ(m.pairs[i].first, i);
    EXPECT_EQ(m.pairs[i].second, i);
    EXPECT_EQ(m.distances[i], 0.0);
  }
}

TEST(NnMatch, HandBuiltAndTies) {
  const Array src = Array::from_rows(2, 2, {0, 0, 5, 5});
  const Array tgt = Array::from_rows(3, 2, {1, 0, -1, 0, 4, 5});
  const MatchSet m = nn_match(src, tgt);
  EXPECT_EQ(m.pairs[0].second, 0u);  // tie between rows 0 and 1
  EXPECT_EQ(m.pairs[1].second, 2u);
  EXPECT_EQ(m.distances[0], 1.0);
  EXPECT_THROW(nn_match(src, Array(0, 2)), Error);
  EXPECT_THROW(nn_match(src, Array(3, 3)), ShapeError);
}

TEST(NnMatch, MatchesBruteForceOracle) {
  const Array a = random_array(500, 16, 2), b = random_array(500, 16, 3);
  const MatchSet m = nn_match(a, b);
  for (std::size_t i = 0; i < 500; ++i) {
    std::size_t arg = 0;
    double best = 1e300;
    for (std::size_t j = 0; j < 500; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < 16; ++c) s += (a(i, c) - b(j, c)) * (a(i, c) - b(j, c));
      if (s < best) {
        best = s;
        arg = j;
      }
    }
    ASSERT_EQ(m.pairs[i].second, arg);
  }
}

TEST(InlierRatio, Examples) {
  const auto src = random_points(10, 1.0, 4);
  const RigidTransform gt = some_transform();
  auto tgt = transformed(gt, src);
  EXPECT_EQ(inlier_ratio(identity_matches(10), gt, src, tgt, 0.1), 1.0);
  auto far = tgt;
  for (auto& p : far) p += Vec3(0.2, 0, 0);
  EXPECT_EQ(inlier_ratio(identity_matches(10), gt, src, far, 0.1), 0.0);
  for (std::size_t k = 7; k < 10; ++k) tgt[k] += Vec3(0, 0.15, 0);
  EXPECT_NEAR(inlier_ratio(identity_matches(10), gt, src, tgt, 0.1), 0.7, 1e-15);
  EXPECT_THROW(inlier_ratio(MatchSet{}, gt, src, tgt, 0.1), Error);
}

TEST(Recall, FeatureMatchingAndRegistration) {
  const std::vector<double> a{0.5, 0.5}, b{0.04, 0.06}, edge{0.05};
  EXPECT_EQ(feature_matching_recall(a, 0.05), 1.0);
  EXPECT_EQ(feature_matching_recall(b, 0.05), 0.5);
  EXPECT_EQ(feature_matching_recall(edge, 0.05), 0.0);
  const std::vector<double> zeros{0, 0, 0}, mixed{0.1, 0.3};
  EXPECT_EQ(registration_recall(zeros, 0.2), 1.0);
  EXPECT_EQ(registration_recall(mixed, 0.2), 0.5);
  EXPECT_THROW(feature_matching_recall(std::vector<double>{}, 0.05), Error);
}

TEST(Ransac, ExactMatchesRecoverTransform) {
  const auto src = random_points(100, 1.0, 5);
  const RigidTransform gt = some_transform();
  const auto tgt = transformed(gt, src);
  const RegistrationResult r = ransac_register(identity_matches(100), src, tgt, 200, 0.1, 7);
  ASSERT_TRUE(r.success);
  EXPECT_LT((r.transform.rotation - gt.rotation).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LT((r.transform.translation - gt.translation).norm(), 1e-9);
  EXPECT_EQ(r.inliers, 100u);
  EXPECT_TRUE(r.transform.valid(1e-9));
}

TEST(Ransac, SurvivesGrossOutliers) {
  const auto src = random_points(200, 1.0, 6);
  const RigidTransform gt = some_transform();
  auto tgt = transformed(gt, src);
  std::mt19937_64 rng(8);
  std::normal_distribution<double> noise(0.0, 0.005);
  std::uniform_real_distribution<double> junk(-2.0, 2.0);
  for (std::size_t k = 0; k < 200; ++k) {
    if (k % 5 < 3) {
      tgt[k] = Vec3(junk(rng), junk(rng), junk(rng));
    } else {
      tgt[k] += Vec3(noise(rng), noise(rng), noise(rng));
    }
  }
  const RegistrationResult r = ransac_register(identity_matches(200), src, tgt, 5000, 0.05, 9);
  ASSERT_TRUE(r.success);
  EXPECT_LT(rad_to_deg(rotation_error(r.transform.rotation, gt.rotation)), 0.5);
  EXPECT_LT(translation_error(r.transform.translation, gt.translation), 0.01);
  const RegistrationResult again = ransac_register(identity_matches(200), src, tgt, 5000, 0.05, 9);
  EXPECT_EQ(again.transform.rotation, r.transform.rotation);
  EXPECT_EQ(again.transform.translation, r.transform.translation);
}

TEST(Ransac, TooFewMatchesFails) {
  const auto src = random_points(2, 1.0, 7);
  EXPECT_FALSE(ransac_register(identity_matches(2), src, src, 100, 0.1, 1).success);
}

TEST(Rmse, Examples) {
  const auto src = random_points(50, 1.0, 10);
  const RigidTransform gt = some_transform();
  const auto tgt = transformed(gt, src);
  CorrespondenceSet c;
  for (std::size_t i = 0; i < 50; ++i) c.pairs.emplace_back(i, i);
  EXPECT_LT(rmse_dis(gt, c, src, tgt), 1e-15);
  RigidTransform off = gt;
  off.translation += Vec3(0.1, 0, 0);
  EXPECT_NEAR(rmse_dis(off, c, src, tgt), 0.1, 1e-12);

  const RigidTransform pert{axis_angle_rotation(Vec3(0, 1, 1), 0.05) * gt.rotation, gt.translation + Vec3(0.01, 0.02, 0)};
  double s = 0.0;
  for (std::size_t i = 0; i < 50; ++i) s += (pert.rotation * src[i] + pert.translation - tgt[i]).squaredNorm();
  EXPECT_NEAR(rmse_dis(pert, c, src, tgt), std::sqrt(s / 50.0), 1e-12);
  EXPECT_THROW(rmse_dis(gt, CorrespondenceSet{}, src, tgt), Error);
}

TEST(RotationError, Examples) {
  const Mat3 r = axis_angle_rotation(Vec3(0.3, 0.2, 1.0), 1.1);
  EXPECT_NEAR(rotation_error(r, r), 0.0, 1e-7);
  EXPECT_NEAR(rotation_error(Mat3::Identity(), axis_angle_rotation(Vec3::UnitZ(), std::numbers::pi / 2)),
              std::numbers::pi / 2, 1e-12);
}

TEST(RotationError, MatchesQuaternionOracleAndIsSymmetric) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> ang(0.0, std::numbers::pi);
  for (int k = 0; k < 100; ++k) {
    const Mat3 a = axis_angle_rotation(random_unit_vector(rng), ang(rng));
    const Mat3 b = axis_angle_rotation(random_unit_vector(rng), ang(rng));
    const Eigen::Quaterniond q(Mat3(a.transpose() * b));
    const double want = 2.0 * std::atan2(q.vec().norm(), std::abs(q.w()));
    EXPECT_NEAR(rotation_error(a, b), want, 1e-7);
    EXPECT_NEAR(rotation_error(a, b), rotation_error(b, a), 1e-12);
  }
}

TEST(TranslationError, Examples) {
  EXPECT_EQ(translation_error(Vec3(1, 2, 3), Vec3(1, 2, 3)), 0.0);
  EXPECT_NEAR(translation_error(Vec3(0.3, 0, 0.4), Vec3::Zero()), 0.5, 1e-15);
  const Vec3 a(0.1, -0.7, 2.0), b(-0.4, 0.3, 1.1);
  EXPECT_NEAR(translation_error(a, b), std::sqrt(0.25 + 1.0 + 0.81), 1e-15);
}

TEST(Chamfer, Examples) {
  const auto a = random_points(30, 1.0, 12);
  EXPECT_EQ(chamfer_distance(a, a), 0.0);
  const std::vector<Vec3> o{Vec3::Zero()}, x{Vec3(1, 0, 0)};
  EXPECT_EQ(chamfer_distance(o, x), 2.0);
  EXPECT_THROW(chamfer_distance(o, std::vector<Vec3>{}), Error);
}

TEST(Chamfer, MatchesBruteForceAndIsSymmetric) {
  const auto a = random_points(300, 1.0, 13), b = random_points(300, 1.0, 14);
  auto one = [](const std::vector<Vec3>& p, const std::vector<Vec3>& q) {
    double s = 0.0;
    for (const auto& x : p) {
      double m = 1e300;
      for (const auto& y : q) m = std::min(m, (x - y).squaredNorm());
      s += m;
    }
    return s / static_cast<double>(p.size());
  };
  EXPECT_NEAR(chamfer_distance(a, b), one(a, b) + one(b, a), 1e-12);
  EXPECT_NEAR(chamfer_distance(a, b), chamfer_distance(b, a), 1e-12);
}

TEST(AdaptiveThreshold, LatticeAndZeroK) {
  std::vector<Vec3> grid;
  for (int x = 0; x < 5; ++x)
    for (int y = 0; y < 5; ++y)
      for (int z = 0; z < 5; ++z) grid.emplace_back(x, y, z);
  const auto kappa = adaptive_threshold(grid, 1);
  for (double k : kappa) EXPECT_NEAR(k, 1.0, 1e-12);
  for (double k : adaptive_threshold(grid, 0)) EXPECT_EQ(k, 0.0);
  EXPECT_THROW(adaptive_threshold(std::vector<Vec3>(3, Vec3::Zero()), 3), Error);
}

TEST(AdaptiveThreshold, MatchesSortAllOracle) {
  const auto pts = random_points(200, 1.0, 15);
  const auto kappa = adaptive_threshold(pts, 5);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    std::vector<double> d;
    for (std::size_t j = 0; j < pts.size(); ++j)
      if (j != i) d.push_back((pts[i] - pts[j]).norm());
    std::sort(d.begin(), d.end());
    EXPECT_NEAR(kappa[i], (d[0] + d[1] + d[2] + d[3] + d[4]) / 5.0, 1e-12);
  }
}

TEST(AdaptiveInlierRatio, CountsWithinKappa) {
  const std::vector<Vec3> tgt{Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(3, 0, 0)};
  const std::vector<double> kappa{1.0, 1.0, 1.0};
  const std::vector<long> truth{0, 1, -1, 2};
  MatchSet m;
  m.pairs = {{0, 1}, {1, 2}, {2, 0}, {3, 2}};
  // (0 -> 1): 1 <= 1 hit; (1 -> 2): 2 > 1 miss; source 2 has no truth; (3 -> 2) exact.
  EXPECT_NEAR(adaptive_inlier_ratio(m, truth, tgt, kappa), 2.0 / 3.0, 1e-15);
}

// Every metric of a small scenario against direct formulas.
TEST(Pipeline, HandBuiltScenario) {
  const std::vector<Vec3> src{Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1), Vec3(1, 1, 1)};
  const RigidTransform gt{axis_angle_rotation(Vec3::UnitZ(), std::numbers::pi / 6), Vec3(0.5, 0, 0)};
  std::vector<Vec3> tgt = transformed(gt, src);
  tgt[4] += Vec3(0.3, 0, 0);  // one bad match
  const MatchSet m = identity_matches(5);
  EXPECT_NEAR(inlier_ratio(m, gt, src, tgt, 0.1), 0.8, 1e-12);
  const RegistrationResult r = ransac_register(m, src, tgt, 500, 0.1, 3);
  ASSERT_TRUE(r.success);
  EXPECT_EQ(r.inliers, 4u);
  CorrespondenceSet c;
  for (std::size_t i = 0; i < 4; ++i) c.pairs.emplace_back(i, i);
  EXPECT_NEAR(rmse_dis(r.transform, c, src, tgt), 0.0, 1e-12);
  EXPECT_NEAR(rotation_error(r.transform.rotation, gt.rotation), 0.0, 1e-7);
  EXPECT_NEAR(translation_error(r.transform.translation, gt.translation), 0.0, 1e-12);
  // Identity matches hit every target point, so the matched set is the target.
  std::vector<Vec3> matched;
  for (const auto& [i, j] : m.pairs) matched.push_back(tgt[j]);
  EXPECT_EQ(chamfer_distance(matched, tgt), 0.0);
}

TEST(Report, JsonAndCsv) {
  EvalReport rep;
  PairReport ok;
  ok.index = 0;
  ok.inlier_ratio = 0.5;
  ok.matches = 10;
  score_registration(ok, RigidTransform{}, RigidTransform{}, CorrespondenceSet{{{0, 0}}, 0.05},
                     std::vector<Vec3>{Vec3::Zero()}, std::vector<Vec3>{Vec3::Zero()}, MetricConfig{});
  PairReport bad;
  bad.index = 1;
  bad.inlier_ratio = 0.01;
  rep.pairs = {ok, bad};
  aggregate(rep, MetricConfig{});
  EXPECT_EQ(rep.feature_matching_recall, 0.5);
  ASSERT_TRUE(rep.registration_recall);
  EXPECT_EQ(*rep.registration_recall, 0.5);  // the unregistered pair counts as a failure
  EXPECT_EQ(rep.successful, 1u);
  const nlohmann::json j = to_json(rep);
  EXPECT_EQ(j["pairs"][0]["status"], "success");
  EXPECT_EQ(j["pairs"][1]["status"], "unregistered");
  EXPECT_TRUE(j["pairs"][1]["rmse"].is_null());
  EXPECT_EQ(j["aggregate"]["feature_matching_recall"], 0.5);
  std::ostringstream csv;
  write_report_csv(csv, rep);
  std::istringstream lines(csv.str());
  std::string line;
  std::size_t count = 0;
  while (std::getline(lines, line)) ++count;
  EXPECT_EQ(count, 3u);
}

TEST(MetricConfigTest, AllThresholdsPositive) {
  MetricConfig c;
  EXPECT_TRUE(c.validate().empty());
  c.inlier_distance = 0;
  c.rmse_threshold = -1;
  EXPECT_EQ(c.validate().size(), 2u);
}
