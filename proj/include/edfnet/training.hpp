#pragma once

// Experiment configuration, the SGD training loop and seeding helpers.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "edfnet/checkpoint.hpp"
#include "edfnet/config.hpp"
#include "edfnet/errors.hpp"
#include "edfnet/fusion.hpp"
#include "edfnet/geometry.hpp"
#include "edfnet/loss.hpp"
#include "edfnet/metrics.hpp"
#include "edfnet/model.hpp"
#include "edfnet/synthetic.hpp"

namespace edfnet {

inline constexpr const char* kSeedEnvironmentVariable = "EDFNET_SEED";

/// splitmix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  return mix_seed(mix_seed(mix_seed(mix_seed(base) ^ a) ^ b) ^ c);
}

struct OptimizerConfig {
  double learning_rate = 0.1;
  double momentum = 0.98;
  double weight_decay = 1e-6;
  double decay = 0.97;  // per-epoch learning-rate factor
  std::size_t epochs = 150;
  double clip_norm = 0.0;  // 0 disables global gradient-norm clipping

  std::vector<std::string> validate() const {
    std::vector<std::string> errs;
    if (!(learning_rate >= 0.0)) errs.push_back("optimizer.learning_rate: must be nonnegative");
    if (!(momentum >= 0.0 && momentum < 1.0)) errs.push_back("optimizer.momentum: must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) errs.push_back("optimizer.weight_decay: must be nonnegative");
    if (!(decay > 0.0 && decay <= 1.0)) errs.push_back("optimizer.decay: must lie in (0, 1]");
    if (epochs < 1) errs.push_back("optimizer.epochs: must be at least 1");
    if (!(clip_norm >= 0.0)) errs.push_back("optimizer.clip_norm: must be nonnegative");
    return errs;
  }
};

struct DatasetConfig {
  SyntheticPairSpec pair;
  std::size_t train_pairs = 300;
  std::size_t eval_pairs = 20;
  AugmentationConfig augmentation;  // seed field unused; per-step seeds are derived

  std::vector<std::string> validate() const {
    auto errs = pair.validate();
    if (train_pairs < 1) errs.push_back("dataset.train_pairs: must be at least 1");
    if (eval_pairs < 1) errs.push_back("dataset.eval_pairs: must be at least 1");
    if (!augmentation.valid()) errs.push_back("dataset: invalid augmentation settings");
    return errs;
  }
};

struct ExperimentConfig {
  EncoderConfig encoder;
  FusionConfig fusion;
  LossConfig loss;
  MetricConfig metrics;
  OptimizerConfig optimizer;
  DatasetConfig dataset;
  std::optional<std::uint64_t> seed;

  /// Settings used by the acceptance runs: a scaled-down encoder on
  /// 2000-point synthetic scenes.
  static ExperimentConfig desk_preset() {
    ExperimentConfig c;
    c.encoder.channels = {16, 32, 64, 128, 256};
    c.encoder.input_cell = 0.07;
    c.encoder.base_cell = 0.1;
    c.encoder.initial = InitialFeatures::ones;
    c.fusion.width = 32;
    c.optimizer.learning_rate = 0.003;
    c.optimizer.momentum = 0.9;
    c.optimizer.epochs = 20;
    c.optimizer.decay = 0.97;
    c.optimizer.clip_norm = 2.0;
    c.metrics.ransac_iterations = 5000;
    c.dataset.train_pairs = 300;
    c.dataset.eval_pairs = 20;
    c.dataset.augmentation.max_rotation_deg = 10.0;
    return c;
  }

  static ExperimentConfig full_preset() {
    ExperimentConfig c;
    c.optimizer.epochs = 150;
    return c;
  }

  std::uint64_t require_seed() const {
    if (!seed) throw ConfigError("experiment.seed: a seed is mandatory");
    return *seed;
  }

  std::vector<std::string> validate() const {
    std::vector<std::string> errs;
    auto append = [&](std::vector<std::string> more) { errs.insert(errs.end(), more.begin(), more.end()); };
    append(encoder.validate());
    append(fusion.validate());
    append(loss.validate());
    append(metrics.validate());
    append(optimizer.validate());
    append(dataset.validate());
    if (!seed) errs.push_back("experiment.seed: a seed is mandatory (config, flag or " +
                              std::string(kSeedEnvironmentVariable) + ")");
    return errs;
  }

  /// Applies every recognized key on top of `base` (preset chosen by
  /// experiment.preset when present). Returns all problems at once.
  static ExperimentConfig from_config(const KeyValueConfig& kv, std::vector<std::string>& errs) {
    ExperimentConfig c;
    const std::string preset = kv.get("experiment.preset", "desk");
    if (preset == "desk") {
      c = desk_preset();
    } else if (preset == "full") {
      c = full_preset();
    } else {
      errs.push_back("experiment.preset: expected 'desk' or 'full'");
    }
    c.encoder = EncoderConfig::from_config(kv, errs, c.encoder);
    c.fusion = FusionConfig::from_config(kv, errs, c.fusion);
    c.loss = LossConfig::from_config(kv, errs, c.loss);
    c.metrics = MetricConfig::from_config(kv, errs, c.metrics);
    auto& o = c.optimizer;
    o.learning_rate = kv.get_double("optimizer.learning_rate", o.learning_rate, errs);
    o.momentum = kv.get_double("optimizer.momentum", o.momentum, errs);
    o.weight_decay = kv.get_double("optimizer.weight_decay", o.weight_decay, errs);
    o.decay = kv.get_double("optimizer.decay", o.decay, errs);
    o.epochs = static_cast<std::size_t>(
        std::max<long long>(0, kv.get_int("optimizer.epochs", static_cast<long long>(o.epochs), errs)));
    o.clip_norm = kv.get_double("optimizer.clip_norm", o.clip_norm, errs);
    auto& d = c.dataset;
    d.pair = SyntheticPairSpec::from_config(kv, errs, d.pair);
    d.train_pairs = static_cast<std::size_t>(
        std::max<long long>(0, kv.get_int("dataset.train_pairs", static_cast<long long>(d.train_pairs), errs)));
    d.eval_pairs = static_cast<std::size_t>(
        std::max<long long>(0, kv.get_int("dataset.eval_pairs", static_cast<long long>(d.eval_pairs), errs)));
    auto& a = d.augmentation;
    a.jitter_std = kv.get_double("augment.jitter_std", a.jitter_std, errs);
    a.scale_low = kv.get_double("augment.scale_low", a.scale_low, errs);
    a.scale_high = kv.get_double("augment.scale_high", a.scale_high, errs);
    a.max_rotation_deg = kv.get_double("augment.max_rotation_deg", a.max_rotation_deg, errs);
    if (kv.has("experiment.seed")) {
      c.seed = static_cast<std::uint64_t>(kv.get_int("experiment.seed", 0, errs));
    } else if (const char* env = std::getenv(kSeedEnvironmentVariable)) {
      try {
        c.seed = std::stoull(env);
      } catch (const std::exception&) {
        errs.push_back(std::string(kSeedEnvironmentVariable) + ": not an unsigned integer");
      }
    }
    if (c.seed) c.encoder.seed = *c.seed;
    return c;
  }

  /// Parses, validates and throws one ConfigError listing every problem.
  static ExperimentConfig load(const KeyValueConfig& kv) {
    std::vector<std::string> errs;
    ExperimentConfig c = from_config(kv, errs);
    for (auto& e : c.validate()) errs.push_back(std::move(e));
    if (!errs.empty()) {
      std::string msg;
      for (std::size_t i = 0; i < errs.size(); ++i) msg += (i ? "; " : "") + errs[i];
      throw ConfigError(msg);
    }
    return c;
  }
};

// ---------------------------------------------------------------------------
// Optimizer

/// SGD with heavy-ball momentum and L2 weight decay:
/// v <- mu v + (g + wd p); p <- p - lr v.
class Sgd {
 public:
  Sgd(std::vector<ad::Parameter*> params, const OptimizerConfig& cfg)
      : params_(std::move(params)), cfg_(cfg), lr_(cfg.learning_rate) {
    for (auto* p : params_) velocity_.emplace_back(p->value.shape());
  }

  double learning_rate() const { return lr_; }
  void end_epoch() { lr_ *= cfg_.decay; }

  void zero_grad() {
    for (auto* p : params_) p->reset_grad();
  }

  double grad_norm() const {
    double s = 0.0;
    for (const auto* p : params_) {
      for (double g : p->grad.values()) s += g * g;
    }
    return std::sqrt(s);
  }

  void step() {
    double scale = 1.0;
    if (cfg_.clip_norm > 0.0) {
      const double n = grad_norm();
      if (n > cfg_.clip_norm) scale = cfg_.clip_norm / n;
    }
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& w = params_[k]->value.values();
      const auto& g = params_[k]->grad.values();
      auto& v = velocity_[k].values();
      for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = cfg_.momentum * v[i] + (scale * g[i] + cfg_.weight_decay * w[i]);
        w[i] -= lr_ * v[i];
      }
    }
  }

 private:
  std::vector<ad::Parameter*> params_;
  OptimizerConfig cfg_;
  double lr_;
  std::vector<ad::Array> velocity_;
};

// ---------------------------------------------------------------------------
// Data

inline std::uint64_t train_pair_seed(std::uint64_t seed, std::size_t pair) { return derive_seed(seed, 1, pair); }
inline std::uint64_t eval_pair_seed(std::uint64_t seed, std::size_t pair) { return derive_seed(seed, 2, pair); }

/// One training example: augmented clouds plus index correspondences and the
/// metric target positions used for the safe-radius test.
struct TrainingExample {
  PointCloud source, target;
  CorrespondenceSet correspondences;
  std::vector<Vec3> target_metric;  // un-augmented target positions
};

inline TrainingExample make_training_example(const ExperimentConfig& cfg, std::size_t pair, std::size_t epoch) {
  const std::uint64_t seed = cfg.require_seed();
  const SyntheticPair p = generate_pair(cfg.dataset.pair, train_pair_seed(seed, pair));
  TrainingExample ex;
  ex.correspondences = build_gt_correspondences(p.source, p.target, p.gt, cfg.metrics.gt_threshold);
  ex.target_metric = p.target.points;
  // One scale for both clouds; rotation and jitter are drawn per cloud.
  AugmentationConfig a = cfg.dataset.augmentation;
  std::mt19937_64 scale_rng(derive_seed(seed, 6, pair, epoch));
  if (a.scale_low < a.scale_high) {
    a.scale_low = a.scale_high = std::uniform_real_distribution<double>(a.scale_low, a.scale_high)(scale_rng);
  }
  a.seed = derive_seed(seed, 3, pair, epoch * 2);
  ex.source = augment(p.source, a).cloud;
  a.seed = derive_seed(seed, 3, pair, epoch * 2 + 1);
  ex.target = augment(p.target, a).cloud;
  return ex;
}

// ---------------------------------------------------------------------------
// Training

struct StepStats {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
  std::size_t active_negatives = 0;
  std::size_t skipped_negatives = 0;
};

/// Loss of one example under an active tape; backward must run before
/// `ctx` goes out of scope.
inline LossTerms example_loss(ad::Tape& t, Network& net, PairContext& ctx, const TrainingExample& ex,
                              const LossConfig& loss_cfg, std::uint64_t batch_seed) {
  const CorrespondenceSet batch = sample_correspondences(ex.correspondences, loss_cfg.batch, batch_seed);
  std::vector<std::size_t> rows_x, rows_y;
  std::vector<Vec3> negatives_pool;
  for (const auto& [i, j] : batch.pairs) {
    rows_x.push_back(i);
    rows_y.push_back(j);
    negatives_pool.push_back(ex.target_metric[j]);
  }
  PairOutput out = net.forward(t, ctx, rows_x, rows_y);
  return contrastive_loss(out.source, out.target, negatives_pool, loss_cfg);
}

struct TrainOptions {
  std::ostream* log = nullptr;                          // CSV: step,epoch,loss,active_negatives,skipped_negatives
  std::optional<std::filesystem::path> checkpoint_dir;  // epoch_NNN.ckpt written when set
  std::function<void(const StepStats&)> on_step;
};

struct TrainResult {
  std::vector<double> epoch_mean_loss;
  std::vector<std::size_t> epoch_skipped_negatives;
  std::size_t steps = 0;
};

inline TrainResult train(Network& net, const ExperimentConfig& cfg, const TrainOptions& opts = {}) {
  if (auto errs = cfg.validate(); !errs.empty()) throw ConfigError(errs.front());
  const std::uint64_t seed = cfg.require_seed();
  auto params = net.parameters();
  Sgd sgd(params, cfg.optimizer);
  TrainResult result;
  if (opts.log) *opts.log << "step,epoch,loss,active_negatives,skipped_negatives\n";
  if (opts.checkpoint_dir) std::filesystem::create_directories(*opts.checkpoint_dir);
  char buf[64];

  for (std::size_t epoch = 1; epoch <= cfg.optimizer.epochs; ++epoch) {
    std::vector<std::size_t> order(cfg.dataset.train_pairs);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 shuffle_rng(derive_seed(seed, 4, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double sum = 0.0;
    std::size_t skipped = 0;
    for (std::size_t pair : order) {
      const TrainingExample ex = make_training_example(cfg, pair, epoch);
      PairContext ctx = net.prepare(ex.source, ex.target);
      ad::Tape t;
      const std::uint64_t batch_seed = derive_seed(seed, 5, pair, epoch);
      LossTerms terms = example_loss(t, net, ctx, ex, cfg.loss, batch_seed);
      const double loss = t.value(terms.loss).item();
      if (!std::isfinite(loss)) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + " pair " + std::to_string(pair) +
                            " (pair seed " + std::to_string(train_pair_seed(seed, pair)) + ", batch seed " +
                            std::to_string(batch_seed) + ")");
      }
      sgd.zero_grad();
      t.backward(terms.loss);
      sgd.step();
      ++result.steps;
      sum += loss;
      skipped += terms.skipped_negatives;
      StepStats st{result.steps, epoch, loss, terms.active_negatives, terms.skipped_negatives};
      if (opts.log) {
        std::snprintf(buf, sizeof(buf), "%.17g", loss);
        *opts.log << st.step << ',' << epoch << ',' << buf << ',' << st.active_negatives << ','
                  << st.skipped_negatives << '\n';
      }
      if (opts.on_step) opts.on_step(st);
    }
    result.epoch_mean_loss.push_back(sum / static_cast<double>(order.size()));
    result.epoch_skipped_negatives.push_back(skipped);
    sgd.end_epoch();
    if (opts.checkpoint_dir) {
      std::snprintf(buf, sizeof(buf), "epoch_%03zu.ckpt", epoch);
      const std::vector<const ad::Parameter*> frozen(params.begin(), params.end());
      ad::save_checkpoint_file(*opts.checkpoint_dir / buf, frozen);
    }
  }
  return result;
}

}  // namespace edfnet
