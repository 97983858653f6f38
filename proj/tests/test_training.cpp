#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>

#include "dcctl/numerics/gradcheck.hpp"
#include "dcctl/training.hpp"
#include "dcctl/verify.hpp"

using namespace dcctl;
using TD = Tensor<double>;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.stem_width = 4;
  c.width = 8;
  c.emb_dim = 8;
  c.level_grid = {16, 8};
  c.steps = 20;
  return c;
}

const scene::Dataset& dataset() {
  static const scene::Dataset ds = [] {
    const fs::path dir = fs::temp_directory_path() / "dcctl_test_training_data";
    scene::write_dataset(24, dir, 3, 4);
    return scene::read_dataset(dir);
  }();
  return ds;
}

TrainConfig quick(Stage s, int steps) {
  TrainConfig c;
  c.stage = s;
  c.steps = steps;
  c.batch = 2;
  c.lr = 1e-3;
  c.seed = 5;
  c.log_every = 0;
  return c;
}

std::vector<std::vector<float>> snapshot(const nn::NamedParams<float>& ps) {
  std::vector<std::vector<float>> out;
  for (const auto& [name, p] : ps) out.push_back(p.values());
  return out;
}

TrainResult run(Model<float>& m, const TrainConfig& cfg) {
  AdamW<float> opt(stage_params(m, cfg), adam_options<float>(cfg));
  return train_stage(m, dataset(), cfg, opt, 0, TrainLog{});
}

}  // namespace

TEST(MaskWeights, FullQuarterAndArea) {
  for (const auto& r : verify::mask_weight_checks(1)) EXPECT_TRUE(r.passed) << r.name << ": " << r.detail;
  const TD empty = foreground_weight_mask(TD::zeros({1, 1, 4, 4}));
  for (double v : empty.values()) EXPECT_EQ(v, 1.0);
  std::vector<double> two(2 * 16, 0.0);
  two[0] = 1;                                   // first item: 1 of 16
  std::fill(two.begin() + 16, two.end(), 1.0);  // second: all
  const TD w = foreground_weight_mask(TD::from({2, 1, 4, 4}, two));
  EXPECT_EQ(w[0], 16.0);
  EXPECT_EQ(w[1], 1.0);
  EXPECT_EQ(w[20], 1.0);
}

TEST(MseLoss, HandComputed) {
  const TD eps = TD::from({1, 1, 2, 2}, {1, 2, 3, 4});
  const TD hat = TD::from({1, 1, 2, 2}, {0, 2, 1, 5});
  const TD m = TD::from({1, 1, 2, 2}, {2, 2, 1, 1});
  // (2*1 + 2*0 + 1*4 + 1*1) / 4
  EXPECT_DOUBLE_EQ(mse_loss(eps, hat, m).item(), 7.0 / 4.0);
  EXPECT_THROW(mse_loss(eps, TD::zeros({1, 1, 2, 3}), m), DimensionError);
}

TEST(TransformLoss, IdenticalOffsetAndHand) {
  Rng rng(2);
  const FeaturePyramid<double> h{{random_tensor({1, 16, 4}, rng), random_tensor({1, 4, 4}, rng)}};
  const TD ones = TD::full({1, 1, 4, 4}, 1.0);
  EXPECT_EQ(transform_loss(h, h, ones).item(), 0.0);
  FeaturePyramid<double> shifted;
  for (const auto& l : h.levels) shifted.levels.push_back(add_scalar(l, 0.25));
  EXPECT_NEAR(transform_loss(h, shifted, ones).item(), 0.25, 1e-15);

  // one level, two tokens of width 1: |1-0| * 3 and |2-4| * 1, mean over 2 entries
  const FeaturePyramid<double> a{{TD::from({1, 4, 1}, {1, 2, 0, 0})}}, b{{TD::from({1, 4, 1}, {0, 4, 0, 0})}};
  const TD m = TD::from({1, 1, 2, 2}, {3, 1, 5, 7});
  EXPECT_DOUBLE_EQ(transform_loss(a, b, m).item(), (3.0 + 2.0) / 4.0);
}

TEST(TotalLoss, LambdaWeightsTheTransformTerm) {
  const TD mse = TD::scalar(0.5), tr = TD::scalar(2.0);
  EXPECT_EQ(total_loss(mse, tr, 0.0).item(), 0.5);
  EXPECT_EQ(total_loss(mse, tr, 1.0).item(), 2.5);
  EXPECT_EQ(total_loss(mse, TD{}, 1.0).item(), 0.5);

  Rng rng(3);
  const TD eps = random_tensor({1, 1, 4, 4}, rng), m = foreground_weight_mask(TD::from({1, 1, 4, 4}, std::vector<double>(16, 1.0)));
  const FeaturePyramid<double> target{{random_tensor({1, 4, 4}, rng)}};
  Rng probe(4);
  const auto r = grad_check(
      [&](const std::vector<TD>& v) {
        return total_loss(mse_loss(eps, v[0], m), transform_loss(FeaturePyramid<double>{{v[1]}}, target, m), 0.3);
      },
      {random_tensor({1, 1, 4, 4}, rng), random_tensor({1, 4, 4}, rng)}, 100, probe);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(ClassDropout, RateWithinOnePercent) {
  Rng rng(6);
  const int n = 10000;
  int dropped = 0;
  for (int i = 0; i < n; ++i) dropped += drop_class(rng, 0.2);
  EXPECT_NEAR(dropped / double(n), 0.2, 0.01);
}

TEST(StageLoss, LambdaSweepCombinesTerms) {
  const Model<float> m(tiny(), 1);
  const auto train = dataset().split("train");
  const CountBuckets buckets(train);
  for (Stage s : {Stage::intra, Stage::inter})
    for (double lambda : {0.0, 0.1, 1.0}) {
      auto cfg = quick(s, 1);
      cfg.lambda = lambda;
      const auto b = stage_loss(m, train, buckets, cfg, 0);
      ASSERT_TRUE(b.transform.defined());
      EXPECT_GT(b.transform.item(), 0.0f);
      EXPECT_FLOAT_EQ(b.loss.item(), b.mse.item() + static_cast<float>(lambda) * b.transform.item());
    }
  const auto base = stage_loss(m, train, buckets, quick(Stage::base, 1), 0);
  EXPECT_FALSE(base.transform.defined());
  EXPECT_EQ(base.loss.item(), base.mse.item());
}

TEST(CountBuckets, BatchesShareAnElementCount) {
  const auto train = dataset().split("train");
  const CountBuckets buckets(train);
  Rng rng(7);
  for (int i = 0; i < 50; ++i) {
    const auto picks = buckets.draw(rng, 4);
    for (auto p : picks) EXPECT_EQ(train[p]->spec.elements.size(), train[picks[0]]->spec.elements.size());
  }
}

TEST(Training, BaseLossDecreases) {
  Model<float> m(tiny(), 2);
  auto cfg = quick(Stage::base, 200);
  cfg.batch = 4;
  cfg.lr = 3e-3;
  const auto r = run(m, cfg);
  ASSERT_EQ(r.losses.size(), 200u);
  const double head = std::accumulate(r.losses.begin(), r.losses.begin() + 30, 0.0) / 30;
  const double tail = std::accumulate(r.losses.end() - 30, r.losses.end(), 0.0) / 30;
  EXPECT_LT(tail, head);
}

TEST(Training, FrozenParametersStayBitIdentical) {
  Model<float> m(tiny(), 3);
  const auto base = snapshot(m.params(ParamGroup::base)), inter = snapshot(m.params(ParamGroup::inter));
  const auto intra = snapshot(m.params(ParamGroup::intra));
  run(m, quick(Stage::intra, 3));
  EXPECT_EQ(snapshot(m.params(ParamGroup::base)), base);
  EXPECT_EQ(snapshot(m.params(ParamGroup::inter)), inter);
  EXPECT_NE(snapshot(m.params(ParamGroup::intra)), intra);

  const auto after_intra = snapshot(m.params(ParamGroup::intra));
  run(m, quick(Stage::inter, 3));
  EXPECT_EQ(snapshot(m.params(ParamGroup::base)), base);
  EXPECT_EQ(snapshot(m.params(ParamGroup::intra)), after_intra);
}

TEST(Training, ResumeMatchesUninterruptedRun) {
  const auto cfg = quick(Stage::inter, 6);
  Model<float> straight(tiny(), 4);
  run(straight, cfg);

  Model<float> first(tiny(), 4);
  auto half = cfg;
  half.steps = 3;
  AdamW<float> opt(stage_params(first, half), adam_options<float>(half));
  train_stage(first, dataset(), half, opt, 0, TrainLog{});
  const fs::path path = fs::temp_directory_path() / "dcctl_test_resume.ckpt";
  write_checkpoint(path, make_checkpoint(first, Stage::inter, &opt, 3));

  Model<float> resumed(tiny(), 4);
  const Checkpoint ck = read_checkpoint(path);
  load_parameters(resumed, ck);
  AdamW<float> opt2(stage_params(resumed, cfg), adam_options<float>(cfg));
  opt2.load_state(ck.by_name());
  EXPECT_EQ(checkpoint_steps(ck), 3u);
  train_stage(resumed, dataset(), cfg, opt2, checkpoint_steps(ck), TrainLog{});
  EXPECT_EQ(snapshot(resumed.all_params()), snapshot(straight.all_params()));
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Model<float> m(tiny(), 5);
  run(m, quick(Stage::base, 2));
  const fs::path path = fs::temp_directory_path() / "dcctl_test_roundtrip.ckpt";
  const Checkpoint ck = make_checkpoint<float>(m, Stage::base, nullptr, 2);
  write_checkpoint(path, ck);
  EXPECT_EQ(read_checkpoint(path), ck);
  Model<float> other(tiny(), 99);
  load_parameters(other, read_checkpoint(path));
  EXPECT_EQ(snapshot(other.all_params()), snapshot(m.all_params()));

  ModelConfig wider = tiny();
  wider.width = 12;
  Model<float> mismatched(wider, 0);
  EXPECT_THROW(load_parameters(mismatched, ck), StateError);
  EXPECT_THROW(read_checkpoint(fs::temp_directory_path() / "dcctl_missing.ckpt"), StateError);
}

TEST(TrainLog, WritesParseableRecords) {
  std::ostringstream os;
  const TrainLog log{&os};
  TrainConfig cfg;
  log.header(cfg);
  log.record(0, {1.5, 1.25, 0.25}, 0.7, 3.0);
  log.record(50, {0.5, 0.5, 0}, 0.2, 9.0);
  EXPECT_EQ(os.str().find("elapsed"), std::string::npos);  // timing would break byte-identical logs
  std::istringstream in(os.str());
  const auto recs = parse_log(in);
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[1].first, 50u);
  EXPECT_DOUBLE_EQ(recs[0].second, 1.5);

  std::istringstream bad("format=dcctl-log\nstep=1 loss=2\nstep=2 loss\n");
  try {
    parse_log(bad);
    FAIL() << "malformed log accepted";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3);
  }
}

TEST(TrainConfig, RejectsBadValues) {
  TrainConfig c;
  c.lr = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.layout_kinds = {ConditionKind::edge};
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.class_dropout = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(parse_stage("final"), ConfigError);
}
