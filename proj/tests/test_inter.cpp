#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "dcctl/inter_element.hpp"
#include "dcctl/verify.hpp"

using namespace dcctl;
using TD = Tensor<double>;

namespace {

ModelConfig small() {
  ModelConfig c;
  c.image_size = 8;
  c.stem_width = 4;
  c.width = 8;
  c.emb_dim = 8;
  c.level_grid = {4, 2};
  return c;
}

FeaturePyramid<double> pyramid(std::uint64_t seed, const ModelConfig& cfg, std::size_t batch = 1) {
  Rng rng(seed);
  FeaturePyramid<double> p;
  for (auto g : cfg.level_grid) p.levels.push_back(random_tensor({batch, g * g, cfg.width}, rng));
  return p;
}

double max_diff(const TD& a, const TD& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

void perturb(const nn::NamedParams<double>& ps, std::uint64_t seed) {
  Rng rng(seed);
  for (const auto& [name, p] : ps) {
    TD t = p;
    for (auto& v : t.mutable_data()) v += 0.3 * rng.normal();
  }
}

}  // namespace

TEST(SortAndStack, SingleElementIsItsPyramid) {
  const auto cfg = small();
  const auto p = pyramid(1, cfg);
  const auto s = sort_and_stack<double>({{p, 0}});
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].x.shape(), (Shape{1, 1, 16, 8}));
  EXPECT_EQ(s[0].x.values(), p[0].values());
}

TEST(SortAndStack, BottomLayerFirst) {
  const auto cfg = small();
  const auto fg = pyramid(2, cfg), bg = pyramid(3, cfg);
  const auto s = sort_and_stack<double>({{fg, 1}, {bg, 0}});
  EXPECT_EQ(slice(s[0].x, 1, 0, 1).values(), bg[0].values());
  EXPECT_EQ(slice(s[0].x, 1, 1, 1).values(), fg[0].values());
  EXPECT_EQ(s[0].orders, (std::vector<std::int64_t>{0, 1}));
}

TEST(SortAndStack, MatchesReferenceSort) {
  const auto cfg = small();
  Rng rng(4);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<int> orders{rng.range(0, 50), rng.range(51, 100), rng.range(101, 150)};
    for (std::size_t i = orders.size(); i > 1; --i) std::swap(orders[i - 1], orders[rng.below(i)]);
    std::vector<OrderedPyramid<double>> in;
    for (std::size_t i = 0; i < 3; ++i) in.push_back({pyramid(100 + i, cfg), orders[i]});
    auto ref = in;
    std::sort(ref.begin(), ref.end(), [](const auto& a, const auto& b) { return a.order < b.order; });
    const auto s = sort_and_stack(in);
    for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(slice(s[1].x, 1, l, 1).values(), ref[l].pyramid[1].values());
  }
  EXPECT_THROW(sort_and_stack<double>({{pyramid(5, cfg), 1}, {pyramid(6, cfg), 1}}), ContractError);
}

TEST(SpatialReweigh, HalfAtInitAndShapePreserved) {
  Rng rng(7);
  const SpatialReweigh<double> sp(small(), 2, rng);
  for (std::size_t b : {1, 3})
    for (std::size_t l : {1, 2, 4}) {
      const TD x = random_tensor({b, l, 4, 8}, rng);
      std::vector<std::int64_t> orders(l);
      for (std::size_t i = 0; i < l; ++i) orders[i] = static_cast<std::int64_t>(i);
      const auto y = sp({x, orders});
      EXPECT_EQ(y.features.x.shape(), x.shape());
      for (double w : y.weights.values()) EXPECT_EQ(w, 0.5);
      for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.features.x[i], 0.5 * x[i]);
    }
}

TEST(SpatialReweigh, WeightsStayInsideUnitInterval) {
  Rng rng(8);
  SpatialReweigh<double> sp(small(), 2, rng);
  nn::NamedParams<double> ps;
  sp.collect("sp", ps);
  perturb(ps, 9);
  const auto y = sp({random_tensor({2, 2, 4, 8}, rng), {0, 1}});
  for (double w : y.weights.values()) {
    EXPECT_GT(w, 0.0);
    EXPECT_LT(w, 1.0);
  }
}

TEST(SpatialReweigh, AttentionMatchesBruteForceOnTwoLayersFourTokens) {
  Rng rng(10);
  SpatialReweigh<double> sp(small(), 2, rng);
  nn::NamedParams<double> ps;
  sp.collect("sp", ps);
  perturb(ps, 11);
  const TD x = random_tensor({1, 2, 4, 8}, rng);
  const auto pos = grid_positions(2, 2);
  const auto& body = sp.body;
  const TD folded = reshape(x, {2, 4, 8});
  const TD a = body.ln1(folded);
  const TD q = rope_apply_2d(body.q(a), pos), k = rope_apply_2d(body.k(a), pos);
  TD xp = add(folded, TD::from({2, 4, 8}, verify::brute_attention(q, k, body.v(a))));
  xp = add(xp, body.ffn(body.ln2(xp)));
  const TD w = sigmoid(body.head(xp));
  EXPECT_LT(max_diff(sp({x, {0, 1}}).weights, reshape(w, {1, 2, 4, 1})), 1e-10);
}

TEST(LayerReweigh, SingleLayerIsIdentity) {
  Rng rng(12);
  LayerReweigh<double> lr(small(), rng);
  nn::NamedParams<double> ps;
  lr.collect("lr", ps);
  perturb(ps, 13);
  const TD x = random_tensor({2, 1, 4, 8}, rng);
  const auto y = lr({x, {0}});
  for (double w : y.weights.values()) EXPECT_EQ(w, 1.0);
  EXPECT_EQ(y.features.x.values(), x.values());
}

TEST(LayerReweigh, WeightsFormADistribution) {
  Rng rng(14);
  const LayerReweigh<double> lr(small(), rng);
  for (std::size_t l = 2; l <= 6; ++l) {
    std::vector<std::int64_t> orders(l);
    for (std::size_t i = 0; i < l; ++i) orders[i] = static_cast<std::int64_t>(i);
    const auto w = lr({random_tensor({2, l, 4, 8}, rng, 2.0), orders}).weights;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t n = 0; n < 4; ++n) {
        double s = 0;
        for (std::size_t i = 0; i < l; ++i) {
          const double v = w[(b * l + i) * 4 + n];
          EXPECT_GE(v, 0.0);
          s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
  }
}

TEST(LayerReweigh, ExchangingOrderIdsChangesWeights) {
  Rng rng(15);
  LayerReweigh<double> lr(small(), rng);
  nn::NamedParams<double> ps;
  lr.collect("lr", ps);
  perturb(ps, 16);
  const TD x = random_tensor({1, 2, 4, 8}, rng);
  const auto a = lr({x, {0, 1}}).weights, b = lr({x, {1, 0}}).weights;
  EXPECT_GT(max_diff(a, b), 1e-4);
  lr.order_embedding = false;
  EXPECT_EQ(lr({x, {0, 1}}).weights.values(), lr({x, {1, 0}}).weights.values());
}

TEST(Reweigh, OutputIsLinearInXForFrozenWeights) {
  Rng rng(17);
  const LayerReweigh<double> lr(small(), rng);
  const TD x = random_tensor({1, 3, 4, 8}, rng);
  const auto y = lr({x, {0, 1, 2}});
  const TD manual = mul(x, y.weights);
  EXPECT_LT(max_diff(y.features.x, manual), 1e-15);
  EXPECT_LT(max_diff(mul(scale(x, 2.5), y.weights), scale(manual, 2.5)), 1e-12);
}

TEST(Fuse, SumsLayers) {
  Rng rng(18);
  const TD a = random_tensor({1, 1, 4, 8}, rng), b = random_tensor({1, 1, 4, 8}, rng);
  EXPECT_EQ(fuse<double>({a, {0}}).values(), a.values());
  const TD two = fuse<double>({concat<double>({a, b}, 1), {0, 1}});
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(two[i], a[i] + b[i]);
}

TEST(InterController, TwoLayerPipelineMatchesHandUnrolled) {
  const auto cfg = small();
  Rng rng(19);
  InterElementController<double> inter(cfg, rng);
  nn::NamedParams<double> ps;
  inter.collect("inter", ps);
  perturb(ps, 20);
  const auto fg = pyramid(21, cfg), bg = pyramid(22, cfg);
  const auto fused = inter({{fg, 5}, {bg, 2}});
  for (std::size_t l = 0; l < 2; ++l) {
    const std::size_t n = cfg.level_grid[l] * cfg.level_grid[l];
    const TD stacked = concat<double>({reshape(bg[l], {1, 1, n, 8}), reshape(fg[l], {1, 1, n, 8})}, 1);
    const auto s = inter.spatial[l]({stacked, {0, 1}});
    const auto r = inter.layer[l](s.features);
    EXPECT_EQ(fused[l].values(), sum_axis(r.features.x, 1).values());
  }
}

TEST(InterController, SingleElementAtInitIsHalf) {
  const auto cfg = small();
  Rng rng(23);
  const InterElementController<double> inter(cfg, rng);
  const auto p = pyramid(24, cfg, 2);
  const auto fused = inter({{p, 0}});
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t i = 0; i < p[l].numel(); ++i) EXPECT_EQ(fused[l][i], 0.5 * p[l][i]);
}

TEST(InterController, DeterministicUnderSeed) {
  const auto cfg = small();
  auto run = [&] {
    Rng rng(25);
    const InterElementController<double> inter(cfg, rng);
    return inter({{pyramid(26, cfg), 0}, {pyramid(27, cfg), 1}})[0].values();
  };
  EXPECT_EQ(run(), run());
}

TEST(InterController, DisabledStagesAreBypassed) {
  const auto cfg = small();
  Rng rng(28);
  InterElementController<double> inter(cfg, rng);
  const std::vector<OrderedPyramid<double>> in{{pyramid(29, cfg), 0}, {pyramid(30, cfg), 1}};
  inter(in);
  EXPECT_EQ(inter.calls.spatial, 2u);
  EXPECT_EQ(inter.calls.layer, 2u);
  EXPECT_EQ(inter.order_rotations(), 4u);  // q and k at each level

  inter.calls = {};
  inter.set_switches(false, true, false);
  const std::size_t rotations = inter.order_rotations();
  inter(in);
  EXPECT_EQ(inter.calls.spatial, 0u);
  EXPECT_EQ(inter.calls.layer, 2u);
  EXPECT_EQ(inter.order_rotations(), rotations);

  inter.calls = {};
  inter.set_switches(true, false, true);
  const auto fused = inter(in);
  EXPECT_EQ(inter.calls.layer, 0u);
  const auto stacks = sort_and_stack(in);
  EXPECT_EQ(fused[0].values(), fuse(inter.spatial[0](stacks[0]).features).values());
}

TEST(InterController, ReshapeRoundTripIsLossless) {
  // With both attention contributions removed and unit weights the path reproduces x.
  const auto cfg = small();
  Rng rng(31);
  InterElementController<double> inter(cfg, rng);
  inter.set_switches(false, false, true);
  const auto p = pyramid(32, cfg);
  EXPECT_EQ(inter({{p, 0}})[1].values(), p[1].values());
}
