// edfnet command line: gen, train, eval, match, register, fuse-diag.
//
// Every command builds an ExperimentConfig from --config, --set and --seed,
// checks it together with its own arguments, and only then does any work.
// Failures print one line "error: <kind>: <message>" to stderr.

#include "CLI11.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "edfnet/evaluation.hpp"
#include "edfnet/point_io.hpp"
#include "edfnet/training.hpp"

using namespace edfnet;
namespace fs = std::filesystem;

namespace {

struct CommonArgs {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string checkpoint;
};

enum class ExitCode { ok = 0, failure = 1, config = 2, io = 3 };

// Collects every problem before anything runs.
struct Problems {
  std::vector<std::string> list;
  void add(std::string s) { list.push_back(std::move(s)); }
  void require_file(const std::string& flag, const std::string& path) {
    if (path.empty()) {
      add(flag + ": required");
    } else if (!fs::is_regular_file(path)) {
      add(flag + ": no such file " + path);
    }
  }
  void require_value(const std::string& flag, const std::string& v) {
    if (v.empty()) add(flag + ": required");
  }
};

ExperimentConfig build_config(const CommonArgs& a, Problems& p) {
  KeyValueConfig kv;
  if (!a.config.empty()) {
    try {
      kv = KeyValueConfig::load(a.config);
    } catch (const ConfigError& e) {
      p.add(e.what());
    }
  }
  for (const auto& s : a.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) {
      p.add("--set: expected key=value, got '" + s + "'");
      continue;
    }
    kv.set(s.substr(0, eq), s.substr(eq + 1));
  }
  if (a.seed) kv.set("experiment.seed", std::to_string(*a.seed));
  ExperimentConfig c = ExperimentConfig::from_config(kv, p.list);
  for (auto& e : c.validate()) p.add(std::move(e));
  return c;
}

void finish_validation(const Problems& p) {
  if (p.list.empty()) return;
  std::string msg;
  for (std::size_t i = 0; i < p.list.size(); ++i) msg += (i ? "; " : "") + p.list[i];
  throw ConfigError(msg);
}

void load_weights(Network& net, const std::string& checkpoint) {
  if (checkpoint.empty()) return;
  auto params = net.parameters();
  ad::load_checkpoint_file(checkpoint, params);
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

void emit_json(const nlohmann::json& j, const std::string& path) {
  if (path.empty()) {
    std::cout << j.dump(2) << '\n';
    return;
  }
  auto out = open_out(path);
  out << j.dump(2) << '\n';
}

RigidTransform parse_transform(const nlohmann::json& j) {
  RigidTransform t;
  const auto& src = j.contains("gt") ? j.at("gt") : j;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) t.rotation(r, c) = src.at("rotation").at(r).at(c).get<double>();
  for (int r = 0; r < 3; ++r) t.translation[r] = src.at("translation").at(r).get<double>();
  if (!t.valid(1e-6)) throw ConfigError("ground-truth transform is not a rotation");
  return t;
}

// ---------------------------------------------------------------------------

int cmd_gen(const CommonArgs& a, const std::string& out_dir, const std::string& split, long long count) {
  Problems p;
  const ExperimentConfig c = build_config(a, p);
  p.require_value("--out", out_dir);
  if (split != "train" && split != "eval") p.add("--split: expected 'train' or 'eval'");
  if (count < 0) p.add("--count: must be nonnegative");
  finish_validation(p);

  const std::size_t n = count > 0 ? static_cast<std::size_t>(count)
                                  : (split == "train" ? c.dataset.train_pairs : c.dataset.eval_pairs);
  fs::create_directories(out_dir);
  nlohmann::json index = nlohmann::json::array();
  char name[32];
  for (std::size_t k = 0; k < n; ++k) {
    const std::uint64_t s = split == "train" ? train_pair_seed(*c.seed, k) : eval_pair_seed(*c.seed, k);
    const SyntheticPair pair = generate_pair(c.dataset.pair, s);
    std::snprintf(name, sizeof(name), "pair_%04zu", k);
    const fs::path base = fs::path(out_dir) / name;
    io::save_cloud(base.string() + "_source.ply", pair.source);
    io::save_cloud(base.string() + "_target.ply", pair.target);
    nlohmann::json meta = {{"index", k}, {"seed", s}, {"gt", transform_json(pair.gt)},
                           {"source_to_target", pair.source_to_target}};
    auto out = open_out(base.string() + "_gt.json");
    out << meta.dump() << '\n';
    index.push_back({{"index", k}, {"seed", s}, {"name", name}});
  }
  emit_json({{"split", split}, {"pairs", index}}, (fs::path(out_dir) / "index.json").string());
  std::cout << "wrote " << n << " pairs to " << out_dir << '\n';
  return 0;
}

int cmd_train(const CommonArgs& a, const std::string& out_dir) {
  Problems p;
  const ExperimentConfig c = build_config(a, p);
  p.require_value("--out", out_dir);
  if (!a.checkpoint.empty() && !fs::is_regular_file(a.checkpoint)) p.add("--checkpoint: no such file " + a.checkpoint);
  finish_validation(p);

  Network net(c.encoder, c.fusion);
  load_weights(net, a.checkpoint);
  fs::create_directories(out_dir);
  auto log = open_out(fs::path(out_dir) / "train_log.csv");
  TrainOptions opts;
  opts.log = &log;
  opts.checkpoint_dir = fs::path(out_dir);
  opts.on_step = [&](const StepStats& s) {
    if (s.step % 50 == 0) std::cerr << "epoch " << s.epoch << " step " << s.step << " loss " << s.loss << '\n';
  };
  const TrainResult r = train(net, c, opts);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "epoch_%03zu.ckpt", c.optimizer.epochs);
  fs::copy_file(fs::path(out_dir) / buf, fs::path(out_dir) / "final.ckpt", fs::copy_options::overwrite_existing);
  emit_json({{"steps", r.steps},
             {"epoch_mean_loss", r.epoch_mean_loss},
             {"epoch_skipped_negatives", r.epoch_skipped_negatives},
             {"checkpoint", (fs::path(out_dir) / "final.ckpt").string()}},
            (fs::path(out_dir) / "train_summary.json").string());
  std::cout << "final checkpoint " << (fs::path(out_dir) / "final.ckpt").string() << '\n';
  return 0;
}

int cmd_eval(const CommonArgs& a, const std::string& report, const std::string& csv, bool no_ransac) {
  Problems p;
  const ExperimentConfig c = build_config(a, p);
  if (!a.checkpoint.empty() && !fs::is_regular_file(a.checkpoint)) p.add("--checkpoint: no such file " + a.checkpoint);
  finish_validation(p);

  Network net(c.encoder, c.fusion);
  load_weights(net, a.checkpoint);
  EvalOptions opts;
  opts.ransac = !no_ransac;
  const EvalReport rep = evaluate(net, c, opts);
  emit_json(to_json(rep), report);
  if (!csv.empty()) {
    auto out = open_out(csv);
    write_report_csv(out, rep);
  }
  return 0;
}

struct PairArgs {
  std::string source, target, gt, out;
};

void check_pair_args(const PairArgs& pa, Problems& p, bool need_gt = false) {
  p.require_file("--source", pa.source);
  p.require_file("--target", pa.target);
  if (need_gt || !pa.gt.empty()) p.require_file("--gt", pa.gt);
}

int cmd_match(const CommonArgs& a, const PairArgs& pa) {
  Problems p;
  const ExperimentConfig c = build_config(a, p);
  check_pair_args(pa, p);
  if (!a.checkpoint.empty() && !fs::is_regular_file(a.checkpoint)) p.add("--checkpoint: no such file " + a.checkpoint);
  finish_validation(p);

  const PointCloud src = io::load_cloud(pa.source), tgt = io::load_cloud(pa.target);
  Network net(c.encoder, c.fusion);
  load_weights(net, a.checkpoint);
  auto [dx, dy] = net.describe(src, tgt);
  const MatchSet m = nn_match(dx.descriptors, dy.descriptors);
  std::ofstream file;
  if (!pa.out.empty()) file = open_out(pa.out);
  std::ostream& out = pa.out.empty() ? std::cout : file;
  out << "source,target,distance\n";
  char buf[32];
  for (std::size_t k = 0; k < m.size(); ++k) {
    std::snprintf(buf, sizeof(buf), "%.17g", m.distances[k]);
    out << m.pairs[k].first << ',' << m.pairs[k].second << ',' << buf << '\n';
  }
  return 0;
}

int cmd_register(const CommonArgs& a, const PairArgs& pa) {
  Problems p;
  const ExperimentConfig c = build_config(a, p);
  check_pair_args(pa, p);
  if (!a.checkpoint.empty() && !fs::is_regular_file(a.checkpoint)) p.add("--checkpoint: no such file " + a.checkpoint);
  finish_validation(p);

  const PointCloud src = io::load_cloud(pa.source), tgt = io::load_cloud(pa.target);
  std::optional<RigidTransform> gt;
  if (!pa.gt.empty()) {
    std::ifstream in(pa.gt);
    gt = parse_transform(nlohmann::json::parse(in));
  }
  Network net(c.encoder, c.fusion);
  load_weights(net, a.checkpoint);
  auto [dx, dy] = net.describe(src, tgt);
  const MatchSet m = nn_match(dx.descriptors, dy.descriptors);
  const RegistrationResult reg = ransac_register(m, src.points, tgt.points, c.metrics.ransac_iterations,
                                                 c.metrics.ransac_inlier, derive_seed(*c.seed, 13));
  nlohmann::json j = {{"source_points", src.size()},
                      {"target_points", tgt.size()},
                      {"matches", m.size()},
                      {"registered", reg.success},
                      {"ransac_inliers", reg.inliers},
                      {"ransac_iterations", reg.iterations}};
  j["estimate"] = reg.success ? transform_json(reg.transform) : nlohmann::json(nullptr);
  if (gt) {
    j["inlier_ratio"] = inlier_ratio(m, *gt, src.points, tgt.points, c.metrics.inlier_distance);
    if (reg.success) {
      PairReport r;
      const CorrespondenceSet gt_pairs = build_gt_correspondences(src, tgt, *gt, c.metrics.gt_threshold);
      score_registration(r, reg.transform, *gt, gt_pairs, src.points, tgt.points, c.metrics);
      j["rmse"] = *r.rmse;
      j["rotation_error_deg"] = *r.rotation_error_deg;
      j["translation_error"] = *r.translation_error;
      j["success"] = r.success;
    }
  }
  emit_json(j, pa.out);
  return reg.success ? 0 : static_cast<int>(ExitCode::failure);
}

int cmd_fuse_diag(const CommonArgs& a, const PairArgs& pa, long long pair_index) {
  Problems p;
  const ExperimentConfig c = build_config(a, p);
  const bool from_files = !pa.source.empty() || !pa.target.empty();
  if (from_files) check_pair_args(pa, p);
  if (pair_index < 0) p.add("--pair: must be nonnegative");
  if (!a.checkpoint.empty() && !fs::is_regular_file(a.checkpoint)) p.add("--checkpoint: no such file " + a.checkpoint);
  finish_validation(p);

  PointCloud src, tgt;
  if (from_files) {
    src = io::load_cloud(pa.source);
    tgt = io::load_cloud(pa.target);
  } else {
    SyntheticPair sp = generate_pair(c.dataset.pair, eval_pair_seed(*c.seed, static_cast<std::size_t>(pair_index)));
    src = std::move(sp.source);
    tgt = std::move(sp.target);
  }
  Network net(c.encoder, c.fusion);
  load_weights(net, a.checkpoint);
  auto [dx, dy] = net.describe(src, tgt);
  std::ofstream file;
  if (!pa.out.empty()) file = open_out(pa.out);
  write_coefficients_csv(pa.out.empty() ? std::cout : file, dx);
  return 0;
}

std::string one_line(std::string s) {
  for (char& ch : s)
    if (ch == '\n' || ch == '\r') ch = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"edfnet point-cloud descriptors"};
  app.require_subcommand(1);
  CommonArgs common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "key = value config file");
    sub->add_option("--set", common.sets, "override, key=value (repeatable)");
    sub->add_option("--seed", common.seed, "experiment seed");
  };

  std::string out_dir, split = "eval", report, csv;
  long long count = 0, pair_index = 0;
  bool no_ransac = false;
  PairArgs pa;

  auto* gen = app.add_subcommand("gen", "write seeded synthetic pairs as PLY plus ground truth");
  add_common(gen);
  gen->add_option("--out", out_dir, "output directory");
  gen->add_option("--split", split, "train or eval seeds");
  gen->add_option("--count", count, "number of pairs (default from config)");

  auto* tr = app.add_subcommand("train", "train and write per-epoch checkpoints");
  add_common(tr);
  tr->add_option("--out", out_dir, "run directory");
  tr->add_option("--checkpoint", common.checkpoint, "initial weights");

  auto* ev = app.add_subcommand("eval", "held-out synthetic suite report");
  add_common(ev);
  ev->add_option("--checkpoint", common.checkpoint, "trained weights (untrained if omitted)");
  ev->add_option("--report", report, "JSON report path (stdout if omitted)");
  ev->add_option("--csv", csv, "per-pair CSV path");
  ev->add_flag("--no-ransac", no_ransac, "skip registration");

  auto add_pair = [&](CLI::App* sub) {
    add_common(sub);
    sub->add_option("--checkpoint", common.checkpoint, "trained weights");
    sub->add_option("--source", pa.source, "source cloud (.ply or xyz)");
    sub->add_option("--target", pa.target, "target cloud (.ply or xyz)");
    sub->add_option("--out", pa.out, "output path (stdout if omitted)");
  };
  auto* ma = app.add_subcommand("match", "nearest-neighbor descriptor matches as CSV");
  add_pair(ma);
  auto* rg = app.add_subcommand("register", "RANSAC registration of two clouds, JSON report");
  add_pair(rg);
  rg->add_option("--gt", pa.gt, "ground-truth JSON for metrics");
  auto* fd = app.add_subcommand("fuse-diag", "fusion coefficients of the source cloud as CSV");
  add_pair(fd);
  fd->add_option("--pair", pair_index, "held-out synthetic pair when no clouds are given");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << one_line(e.what()) << '\n';
    return static_cast<int>(ExitCode::config);
  }

  try {
    if (gen->parsed()) return cmd_gen(common, out_dir, split, count);
    if (tr->parsed()) return cmd_train(common, out_dir);
    if (ev->parsed()) return cmd_eval(common, report, csv, no_ransac);
    if (ma->parsed()) return cmd_match(common, pa);
    if (rg->parsed()) return cmd_register(common, pa);
    if (fd->parsed()) return cmd_fuse_diag(common, pa, pair_index);
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << one_line(e.what()) << '\n';
    return static_cast<int>(ExitCode::config);
  } catch (const IoError& e) {
    std::cerr << "error: io: " << one_line(e.what()) << '\n';
    return static_cast<int>(ExitCode::io);
  } catch (const std::exception& e) {
    std::cerr << "error: runtime: " << one_line(e.what()) << '\n';
    return static_cast<int>(ExitCode::failure);
  }
  return 0;
}
