// dcctl: dataset generation, staged training, sampling, evaluation, ablations, verification.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "dcctl/config.hpp"
#include "dcctl/eval.hpp"
#include "dcctl/scene_file.hpp"
#include "dcctl/training.hpp"
#include "dcctl/verify.hpp"

namespace fs = std::filesystem;
using namespace dcctl;

namespace {

enum Exit : int { ok = 0, usage = 1, precondition = 2, internal = 3 };

/// Flags shared by every command; unset flags leave the config file value alone.
struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, const std::string& out_help) {
  cmd->add_option("--config", c.config, "key = value config file with [sections]");
  cmd->add_option("--seed", c.seed, "random seed");
  cmd->add_option("--out", c.out, out_help);
}

RunConfig resolve(const Common& c) {
  RunConfig rc;
  try {
    if (!c.config.empty()) rc = load_config(c.config);
  } catch (const ParseError& e) {
    throw ConfigError(c.config + ": " + e.what());  // a bad config is a usage error
  }
  if (c.seed) rc.seed = *c.seed;
  return rc;
}

/// Ablation switches given on the command line.
struct Switches {
  bool no_order = false, no_layer = false, no_spatial = false;
  void add(CLI::App* cmd) {
    cmd->add_flag("--no-order-embedding", no_order, "disable the layer order embedding");
    cmd->add_flag("--no-layer-transformer", no_layer, "disable the layer reweighing transformer");
    cmd->add_flag("--no-spatial-transformer", no_spatial, "disable the spatial reweighing transformer");
  }
  void apply(ModelConfig& m) const {
    if (no_order) m.order_embedding = false;
    if (no_layer) m.layer_transformer = false;
    if (no_spatial) m.spatial_transformer = false;
  }
};

Checkpoint require_checkpoint(const std::string& path, const std::string& what) {
  if (path.empty()) throw StateError(what + " checkpoint required");
  if (!fs::exists(path)) throw StateError(what + " checkpoint not found: '" + path + "'");
  return read_checkpoint(path);
}

/// Model with parameters from a checkpoint of at least `min_stage`.
Model<float> load_model(const RunConfig& rc, const std::string& path, Stage min_stage, const std::string& what) {
  const Checkpoint ck = require_checkpoint(path, what);
  if (static_cast<std::uint32_t>(ck.stage) < static_cast<std::uint32_t>(min_stage))
    throw StateError("'" + path + "' is a " + stage_name(ck.stage) + "-stage checkpoint; " + what + " needs stage " + stage_name(min_stage));
  Model<float> m(rc.model, rc.seed);
  load_parameters(m, ck);
  m.apply_switches();
  return m;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  Common common;
  std::optional<std::size_t> n, test;
};

int cmd_gen_data(const GenDataArgs& a) {
  RunConfig rc = resolve(a.common);
  if (a.common.out.empty()) throw ConfigError("--out is required");
  const std::size_t n = a.n.value_or(rc.data_count);
  const std::size_t test = a.test.value_or(std::min(rc.data_test, n));
  const std::uint64_t seed = a.common.seed.value_or(rc.data_seed);
  const auto s = scene::write_dataset(n, a.common.out, seed, test);
  std::cout << "dataset=" << a.common.out << " count=" << s.count << " train=" << s.train << " test=" << s.test << " seed=" << seed
            << " bytes=" << s.bytes << '\n';
  return ok;
}

struct TrainArgs {
  Common common;
  Switches switches;
  std::string stage, data, init, log;
  std::optional<int> steps;
  std::optional<std::size_t> batch;
  std::optional<double> lr, lambda;
  bool resume = false, quiet = false;
};

TrainConfig train_config(const RunConfig& rc, Stage st) {
  TrainConfig tc = rc.train;
  tc.stage = st;
  tc.steps = rc.steps_for(st);
  tc.seed = rc.seed;
  return tc;
}

int cmd_train(const TrainArgs& a) {
  RunConfig rc = resolve(a.common);
  a.switches.apply(rc.model);
  const Stage st = parse_stage(a.stage);
  if (a.common.out.empty()) throw ConfigError("--out is required");
  TrainConfig tc = train_config(rc, st);
  if (a.steps) tc.steps = *a.steps;
  if (a.batch) tc.batch = *a.batch;
  if (a.lr) tc.lr = *a.lr;
  if (a.lambda) tc.lambda = *a.lambda;
  tc.validate();

  if (!fs::exists(fs::path(a.data) / "manifest")) throw StateError("dataset not found: '" + a.data + "' has no manifest");
  Model<float> m(rc.model, rc.seed);
  if (const auto pre = prerequisite(st)) {
    if (a.init.empty())
      throw StateError(std::string("stage ") + stage_name(st) + " needs a " + stage_name(*pre) + " checkpoint: pass --init <file>");
    if (!fs::exists(a.init)) throw StateError(std::string(stage_name(*pre)) + " checkpoint not found: '" + a.init + "'");
    const Checkpoint init = read_checkpoint(a.init);
    if (static_cast<std::uint32_t>(init.stage) < static_cast<std::uint32_t>(*pre))
      throw StateError("'" + a.init + "' is a " + stage_name(init.stage) + "-stage checkpoint; stage " + stage_name(st) + " needs " +
                       stage_name(*pre));
    load_parameters(m, init);
  } else if (!a.init.empty()) {
    load_parameters(m, read_checkpoint(a.init));
  }
  m.apply_switches();
  const scene::Dataset ds = scene::read_dataset(a.data, true);

  AdamW<float> opt(stage_params(m, tc), adam_options<float>(tc));
  std::uint64_t start = 0;
  if (a.resume && fs::exists(a.common.out)) {
    const Checkpoint ck = read_checkpoint(a.common.out);
    if (ck.stage != st) throw StateError("cannot resume: '" + a.common.out + "' holds a " + stage_name(ck.stage) + "-stage checkpoint");
    load_parameters(m, ck);
    opt.load_state(ck.by_name());
    start = checkpoint_steps(ck);
    std::cout << "resuming " << stage_name(st) << " at step " << start << '\n';
  }

  std::ofstream log_file;
  if (!a.log.empty()) {
    if (fs::path(a.log).has_parent_path()) fs::create_directories(fs::path(a.log).parent_path());
    log_file.open(a.log, start > 0 ? std::ios::app : std::ios::trunc);
    if (!log_file) throw StateError("cannot write log '" + a.log + "'");
  }
  TrainLog log{a.log.empty() ? nullptr : &log_file, a.quiet ? nullptr : &std::cout};
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = train_stage(m, ds, tc, opt, start, log, [&](std::uint64_t done) {
    write_checkpoint(a.common.out, make_checkpoint(m, st, &opt, done));
  });
  write_checkpoint(a.common.out, make_checkpoint(m, st, &opt, static_cast<std::uint64_t>(tc.steps)));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "stage=" << stage_name(st) << " steps=" << res.steps_done << " first_loss=" << res.first_loss
            << " last_loss=" << res.last_loss << " seconds=" << static_cast<long>(secs) << " checkpoint=" << a.common.out << '\n';
  return ok;
}

struct SampleArgs {
  Common common;
  Switches switches;
  std::string checkpoint, scene_path;
  std::vector<std::size_t> swap;
};

int cmd_sample(const SampleArgs& a) {
  RunConfig rc = resolve(a.common);
  a.switches.apply(rc.model);
  if (a.common.out.empty()) throw ConfigError("--out is required");
  SceneFile f = load_scene_file(a.scene_path);
  if (!a.swap.empty()) f.swap_order(a.swap.at(0), a.swap.at(1));
  const auto cs = scene_file_conditions(f);
  const Model<float> m = load_model(rc, a.checkpoint, Stage::inter, "sampling");
  const auto batch = scene_file_batch<float>(f, cs, m.cfg.content_kinds);
  const Tensor<float> x = sample(m, batch, {rc.seed}, Route::fused);
  if (fs::path(a.common.out).has_parent_path()) fs::create_directories(fs::path(a.common.out).parent_path());
  write_ppm(a.common.out, tensor_to_image(x, 0));
  std::cout << "wrote " << a.common.out << '\n';
  return ok;
}

struct EvalArgs {
  Common common;
  Switches switches;
  std::string checkpoint, label = "full";
  std::optional<std::size_t> scenes;
  std::string layouts;
  bool oracle = false;
};

eval::Options eval_options(const RunConfig& rc, const std::optional<std::size_t>& scenes, const std::string& layouts) {
  eval::Options o = rc.eval;
  if (scenes) o.scenes = *scenes;
  if (!layouts.empty()) o.layouts = config_detail::parse_kinds(layouts);
  for (auto k : o.layouts)
    if (!is_layout_kind(k)) throw ConfigError("'" + std::string(kind_name(k)) + "' is not a layout kind");
  return o;
}

int cmd_eval(const EvalArgs& a) {
  RunConfig rc = resolve(a.common);
  a.switches.apply(rc.model);
  const eval::Options o = eval_options(rc, a.scenes, a.layouts);
  eval::Report r;
  if (a.oracle) {
    r = eval::evaluate(eval::oracle_generator(), o, "oracle");
  } else {
    const Model<float> m = load_model(rc, a.checkpoint, Stage::inter, "evaluation");
    r = eval::evaluate(eval::model_generator(m), o, a.label);
  }
  if (!a.common.out.empty()) eval::save_report(a.common.out, r);
  std::cout << eval::summary(r) << '\n';
  return ok;
}

struct AblateArgs {
  Common common;
  std::string init, data, full, full_report, out_dir;
  std::optional<int> steps;
  std::optional<std::size_t> scenes;
};

int cmd_ablate(const AblateArgs& a) {
  const RunConfig base = resolve(a.common);
  if (a.out_dir.empty()) throw ConfigError("--out-dir is required");
  require_checkpoint(a.init, "intra-stage");
  fs::create_directories(a.out_dir);
  struct Row {
    std::string label;
    Switches sw;
  };
  const std::vector<Row> rows{{"full", {}}, {"no_order", {true, false, false}}, {"no_layer", {false, true, false}}, {"no_spatial", {false, false, true}}};
  const eval::Options o = eval_options(base, a.scenes, "");
  std::map<std::string, eval::Report> reports;
  for (const auto& row : rows) {
    const fs::path report_path = fs::path(a.out_dir) / (row.label + ".report");
    if (row.label == "full" && !a.full_report.empty()) {
      reports[row.label] = eval::load_report(a.full_report);
      reports[row.label].label = "full";
      continue;
    }
    RunConfig rc = base;
    row.sw.apply(rc.model);
    std::string ckpt = row.label == "full" && !a.full.empty() ? a.full : (fs::path(a.out_dir) / (row.label + ".ckpt")).string();
    const int steps = a.steps.value_or(rc.inter_steps);
    bool complete = false;
    if (fs::exists(ckpt)) {
      const auto ck = read_checkpoint(ckpt);
      complete = ck.stage == Stage::inter && checkpoint_steps(ck) >= static_cast<std::uint64_t>(steps);
    }
    if (!complete) {
      TrainArgs t;
      t.common = a.common;
      t.common.out = ckpt;
      t.switches = row.sw;
      t.stage = "inter";
      t.data = a.data;
      t.init = a.init;
      t.log = (fs::path(a.out_dir) / (row.label + ".log")).string();
      t.steps = steps;
      t.resume = true;
      t.quiet = true;
      std::cout << "training " << row.label << " (" << steps << " inter steps)" << std::endl;
      cmd_train(t);
    }
    const Model<float> m = load_model(rc, ckpt, Stage::inter, "ablation");
    reports[row.label] = eval::evaluate(eval::model_generator(m), o, row.label);
    std::cout << eval::summary(reports[row.label]) << std::endl;
  }
  const auto& full = reports.at("full");
  std::ofstream summary(fs::path(a.out_dir) / "summary.txt");
  for (const auto& row : rows) {
    auto& r = reports[row.label];
    if (row.label != "full") {
      r.deltas["accuracy"] = r.accuracy - full.accuracy;
      for (const auto& [k, v] : r.iou)
        if (full.iou.contains(k)) r.deltas["iou." + k] = v.iou - full.iou.at(k).iou;
    }
    eval::save_report(fs::path(a.out_dir) / (row.label + ".report"), r);
    summary << eval::summary(r) << '\n';
    std::cout << eval::summary(r) << '\n';
  }
  return ok;
}

struct VerifyArgs {
  Common common;
  bool fault = false;
};

int cmd_verify(const VerifyArgs& a) {
  if (a.fault) detail::cross_normalize_fault() = 1e-3;
  const auto results = verify::run_all(a.common.seed.value_or(0));
  bool all = true;
  for (const auto& r : results) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
    all = all && r.passed;
  }
  std::cout << (all ? "all checks passed" : "verification failed") << '\n';
  return all ? ok : internal;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dcctl: decoupled condition control for toy diffusion"};
  app.require_subcommand(1);

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic scene dataset");
  add_common(gen, gd.common, "dataset directory");
  gen->add_option("--n", gd.n, "number of samples");
  gen->add_option("--test", gd.test, "samples held out as the test split");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "run one training stage");
  add_common(train, tr.common, "checkpoint file");
  tr.switches.add(train);
  train->add_option("--stage", tr.stage, "base, intra or inter")->required();
  train->add_option("--data", tr.data, "dataset directory")->required();
  train->add_option("--init", tr.init, "checkpoint of the previous stage");
  train->add_option("--log", tr.log, "key=value training log");
  train->add_option("--steps", tr.steps, "optimizer steps");
  train->add_option("--batch", tr.batch, "batch size");
  train->add_option("--lr", tr.lr, "learning rate");
  train->add_option("--lambda", tr.lambda, "transform-loss weight");
  train->add_flag("--resume", tr.resume, "continue from the checkpoint at --out");
  train->add_flag("--quiet", tr.quiet, "no progress output");

  SampleArgs sa;
  auto* samp = app.add_subcommand("sample", "generate an image for a scene description");
  add_common(samp, sa.common, "output PPM");
  sa.switches.add(samp);
  samp->add_option("scene", sa.scene_path, "scene description file")->required();
  samp->add_option("--checkpoint", sa.checkpoint, "inter-stage checkpoint")->required();
  samp->add_option("--swap-order", sa.swap, "exchange the layer orders of elements i and j")->expected(2);

  EvalArgs ev;
  auto* evc = app.add_subcommand("eval", "occlusion-order accuracy, layout IoU and color fidelity");
  add_common(evc, ev.common, "report file");
  ev.switches.add(evc);
  evc->add_option("--checkpoint", ev.checkpoint, "inter-stage checkpoint");
  evc->add_option("--scenes", ev.scenes, "held-out scenes (each generated in both orders)");
  evc->add_option("--layouts", ev.layouts, "comma-separated layout kinds");
  evc->add_option("--label", ev.label, "report label");
  evc->add_flag("--oracle", ev.oracle, "score the exact renderer instead of a model");

  AblateArgs ab;
  auto* abl = app.add_subcommand("ablate", "retrain and evaluate with each inter-element component disabled");
  add_common(abl, ab.common, "unused; see --out-dir");
  abl->add_option("--init", ab.init, "intra-stage checkpoint")->required();
  abl->add_option("--data", ab.data, "dataset directory")->required();
  abl->add_option("--full", ab.full, "trained full-model inter checkpoint");
  abl->add_option("--full-report", ab.full_report, "existing evaluation report of the full model");
  abl->add_option("--out-dir", ab.out_dir, "directory for checkpoints, logs and reports")->required();
  abl->add_option("--steps", ab.steps, "inter steps per ablation");
  abl->add_option("--scenes", ab.scenes, "held-out scenes");

  VerifyArgs ve;
  auto* ver = app.add_subcommand("verify", "run the invariant and gradient suites");
  add_common(ver, ve.common, "unused");
  ver->add_flag("--inject-cross-normalize-fault", ve.fault, "perturb cross-normalization (suite self-test)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? ok : usage;
  }

  try {
    if (*gen) return cmd_gen_data(gd);
    if (*train) return cmd_train(tr);
    if (*samp) return cmd_sample(sa);
    if (*evc) return cmd_eval(ev);
    if (*abl) return cmd_ablate(ab);
    if (*ver) return cmd_verify(ve);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return usage;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return precondition;
  } catch (const StateError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return precondition;
  } catch (const LookupError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return precondition;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return precondition;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return internal;
  }
  return usage;
}
