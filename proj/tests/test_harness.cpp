#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "edfnet/evaluation.hpp"
#include "edfnet/training.hpp"

using namespace edfnet;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig c = ExperimentConfig::desk_preset();
  c.encoder.channels = {8, 16};
  c.encoder.input_cell = 0.0;
  c.encoder.base_cell = 0.12;
  c.fusion.width = 8;
  c.dataset.pair.points = 400;
  c.dataset.train_pairs = 3;
  c.dataset.eval_pairs = 3;
  c.optimizer.epochs = 2;
  c.optimizer.learning_rate = 0.003;
  c.metrics.ransac_iterations = 300;
  c.seed = 3;
  c.encoder.seed = 3;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("edfnet_harness_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Config, SectionsCommentsAndOverrides) {
  const auto kv = KeyValueConfig::parse_string(
      "# experiment\n"
      "[experiment]\n"
      "seed = 42\n"
      "[optimizer]\n"
      "learning_rate = 0.05   # trailing comment\n"
      "epochs = 3\n"
      "[encoder]\n"
      "channels = 8, 16, 32\n");
  const ExperimentConfig c = ExperimentConfig::load(kv);
  EXPECT_EQ(*c.seed, 42u);
  EXPECT_EQ(c.encoder.seed, 42u);
  EXPECT_EQ(c.optimizer.learning_rate, 0.05);
  EXPECT_EQ(c.optimizer.epochs, 3u);
  EXPECT_EQ(c.encoder.channels, (std::vector<std::size_t>{8, 16, 32}));
  EXPECT_THROW(KeyValueConfig::parse_string("[broken\n"), ConfigError);
  EXPECT_THROW(KeyValueConfig::parse_string("no equals sign\n"), ConfigError);
}

TEST(Config, ReportsEveryViolationAtOnce) {
  auto kv = KeyValueConfig::parse_string(
      "experiment.seed = 1\n"
      "optimizer.momentum = 1.5\n"
      "optimizer.learning_rate = fast\n"
      "loss.safe_radius = -1\n"
      "dataset.crop = 1.0\n"
      "fusion.mode = multiply\n");
  try {
    ExperimentConfig::load(kv);
    FAIL() << "expected a config error";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    for (const char* key : {"optimizer.momentum", "optimizer.learning_rate", "loss.safe_radius", "dataset.crop",
                            "fusion.mode"}) {
      EXPECT_NE(msg.find(key), std::string::npos) << key << " missing from: " << msg;
    }
  }
}

TEST(Config, SeedIsMandatoryAndFallsBackToEnvironment) {
  const auto kv = KeyValueConfig::parse_string("optimizer.epochs = 1\n");
  ::unsetenv(kSeedEnvironmentVariable);
  EXPECT_THROW(ExperimentConfig::load(kv), ConfigError);
  ::setenv(kSeedEnvironmentVariable, "77", 1);
  EXPECT_EQ(*ExperimentConfig::load(kv).seed, 77u);
  ::setenv(kSeedEnvironmentVariable, "abc", 1);
  EXPECT_THROW(ExperimentConfig::load(kv), ConfigError);
  ::unsetenv(kSeedEnvironmentVariable);
}

TEST(Synthetic, IdentityWithoutNoiseOrCrop) {
  SyntheticPairSpec s;
  s.points = 500;
  s.noise = 0.0;
  s.crop = 0.0;
  s.max_rotation_deg = 0.0;
  s.max_translation = 0.0;
  const SyntheticPair p = generate_pair(s, 1);
  ASSERT_EQ(p.target.size(), p.source.size());
  EXPECT_EQ(p.target.points, p.source.points);
}

TEST(Synthetic, CropKeepsCeilingCount) {
  SyntheticPairSpec s;
  s.points = 2001;
  s.crop = 0.3;
  const SyntheticPair p = generate_pair(s, 2);
  EXPECT_EQ(p.target.size(), static_cast<std::size_t>(std::ceil(0.7 * 2001)));
  std::size_t kept = 0;
  for (long t : p.source_to_target) kept += t >= 0;
  EXPECT_EQ(kept, p.target.size());
}

TEST(Synthetic, GroundTruthRecoversUncroppedPoints) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const SyntheticPair p = generate_pair(SyntheticPairSpec{}, seed);
    const CorrespondenceSet c = build_gt_correspondences(p.source, p.target, p.gt, 0.05);
    std::size_t exact = 0;
    for (const auto& [i, j] : c.pairs) exact += p.source_to_target[i] == static_cast<long>(j);
    const double recovered = static_cast<double>(c.size()) / static_cast<double>(p.target.size());
    EXPECT_GE(recovered, 0.95) << "seed " << seed;
    EXPECT_GE(static_cast<double>(exact) / static_cast<double>(p.target.size()), 0.80) << "seed " << seed;
  }
}

TEST(Synthetic, NonrigidKeepsDenseGroundTruth) {
  SyntheticPairSpec s;
  s.mode = PerturbationMode::nonrigid;
  s.noise = 0.0;
  const SyntheticPair p = generate_pair(s, 4);
  for (std::size_t i = 0; i < p.source.size(); ++i) {
    if (p.source_to_target[i] < 0) continue;
    EXPECT_EQ(p.target.points[static_cast<std::size_t>(p.source_to_target[i])], p.true_position[i]);
  }
}

TEST(Synthetic, InvalidSpecRejected) {
  SyntheticPairSpec s;
  s.points = 10;
  s.crop = 1.0;
  EXPECT_EQ(s.validate().size(), 2u);
  EXPECT_THROW(generate_pair(s, 1), ConfigError);
}

TEST(Training, ZeroLearningRateLeavesParameters) {
  ExperimentConfig c = tiny_config();
  c.optimizer.learning_rate = 0.0;
  c.optimizer.epochs = 1;
  Network net(c.encoder, c.fusion);
  std::vector<ad::Array> before;
  for (auto* p : net.parameters()) before.push_back(p->value);
  const TrainResult r = train(net, c);
  EXPECT_EQ(r.steps, 3u);
  const auto params = net.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) EXPECT_EQ(params[k]->value, before[k]) << params[k]->name;
}

TEST(Training, FixedBatchLossDecreases) {
  const ExperimentConfig c = tiny_config();
  Network net(c.encoder, c.fusion);
  const TrainingExample ex = make_training_example(c, 0, 1);
  Sgd sgd(net.parameters(), c.optimizer);
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 200; ++step) {
    PairContext ctx = net.prepare(ex.source, ex.target);
    ad::Tape t;
    LossTerms terms = example_loss(t, net, ctx, ex, c.loss, 99);
    const double loss = t.value(terms.loss).item();
    if (step == 0) first = loss;
    last = loss;
    sgd.zero_grad();
    t.backward(terms.loss);
    sgd.step();
  }
  EXPECT_LT(last, first);
}

TEST(Training, SameSeedGivesIdenticalCheckpointsAndLogs) {
  const ExperimentConfig c = tiny_config();
  std::string logs[2];
  fs::path dirs[2] = {scratch("run_a"), scratch("run_b")};
  for (int k = 0; k < 2; ++k) {
    Network net(c.encoder, c.fusion);
    std::ostringstream log;
    TrainOptions opts;
    opts.log = &log;
    opts.checkpoint_dir = dirs[k];
    train(net, c, opts);
    logs[k] = log.str();
  }
  EXPECT_EQ(logs[0], logs[1]);
  for (const char* f : {"epoch_001.ckpt", "epoch_002.ckpt"}) {
    ASSERT_TRUE(fs::exists(dirs[0] / f));
    EXPECT_EQ(slurp(dirs[0] / f), slurp(dirs[1] / f)) << f;
  }
  // The checkpoint restores the trained network exactly.
  Network trained(c.encoder, c.fusion);
  auto params = trained.parameters();
  ad::load_checkpoint_file(dirs[0] / "epoch_002.ckpt", params);
  const fs::path resaved = dirs[0] / "resaved.ckpt";
  const std::vector<const ad::Parameter*> frozen(params.begin(), params.end());
  ad::save_checkpoint_file(resaved, frozen);
  EXPECT_EQ(slurp(resaved), slurp(dirs[0] / "epoch_002.ckpt"));
  for (auto& d : dirs) fs::remove_all(d);
}

TEST(Training, AugmentationKeepsCorrespondenceIndices) {
  const ExperimentConfig c = tiny_config();
  const TrainingExample ex = make_training_example(c, 1, 1);
  const SyntheticPair p = generate_pair(c.dataset.pair, train_pair_seed(*c.seed, 1));
  EXPECT_EQ(ex.source.size(), p.source.size());
  EXPECT_EQ(ex.target.size(), p.target.size());
  EXPECT_EQ(ex.target_metric, p.target.points);
  EXPECT_NE(ex.target.points, p.target.points);
}

TEST(Evaluation, GroundTruthEstimateIsPerfect) {
  const ExperimentConfig c = tiny_config();
  EvalReport rep;
  for (std::size_t k = 0; k < 3; ++k) {
    const SyntheticPair p = generate_pair(c.dataset.pair, eval_pair_seed(*c.seed, k));
    const CorrespondenceSet gt_pairs = build_gt_correspondences(p.source, p.target, p.gt, 0.05);
    PairReport r;
    r.index = k;
    r.inlier_ratio = 1.0;
    score_registration(r, p.gt, p.gt, gt_pairs, p.source.points, p.target.points, c.metrics);
    rep.pairs.push_back(r);
  }
  aggregate(rep, c.metrics);
  EXPECT_EQ(*rep.registration_recall, 1.0);
  EXPECT_EQ(*rep.mean_rotation_error_deg, 0.0);
  EXPECT_EQ(*rep.mean_translation_error, 0.0);
}

TEST(Evaluation, RepeatedRunsGiveIdenticalJson) {
  const ExperimentConfig c = tiny_config();
  std::string dumps[2];
  for (auto& d : dumps) {
    Network net(c.encoder, c.fusion);
    d = to_json(evaluate(net, c)).dump();
  }
  EXPECT_EQ(dumps[0], dumps[1]);
  const auto j = nlohmann::json::parse(dumps[0]);
  EXPECT_EQ(j["pairs"].size(), 3u);
  EXPECT_TRUE(j["aggregate"]["feature_matching_recall"].is_number());
}

TEST(Evaluation, NonrigidReportsAdaptiveMetrics) {
  ExperimentConfig c = tiny_config();
  c.dataset.pair.mode = PerturbationMode::nonrigid;
  Network net(c.encoder, c.fusion);
  EvalOptions opts;
  opts.ransac = false;
  const EvalReport rep = evaluate(net, c, opts);
  ASSERT_TRUE(rep.mean_adaptive_inlier_ratio);
  ASSERT_TRUE(rep.mean_chamfer);
  EXPECT_GE(*rep.mean_adaptive_inlier_ratio, 0.0);
  EXPECT_LE(*rep.mean_adaptive_inlier_ratio, 1.0);
  EXPECT_GT(*rep.mean_chamfer, 0.0);
}
