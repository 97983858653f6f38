#include <gtest/gtest.h>

#include <cmath>

#include "dcctl/diffusion.hpp"
#include "dcctl/model.hpp"
#include "dcctl/numerics/gradcheck.hpp"
#include "dcctl/verify.hpp"

using namespace dcctl;
using TD = Tensor<double>;

namespace {

DenoiserConfig small_denoiser() {
  DenoiserConfig c;
  c.image_size = 8;
  c.stem_width = 4;
  c.width = 8;
  c.emb_dim = 8;
  c.level_grid = {4, 2};
  c.steps = 20;
  return c;
}

}  // namespace

TEST(Schedule, MonotoneAndRunningProduct) {
  const NoiseSchedule s(200, 1e-4, 2e-2);
  double prod = 1.0;
  for (int t = 1; t <= 200; ++t) {
    EXPECT_GT(s.beta(t), 0.0);
    EXPECT_LT(s.beta(t), 1.0);
    if (t > 1) {
      EXPECT_GE(s.beta(t), s.beta(t - 1));
      EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    }
    prod *= 1.0 - s.beta(t);
    EXPECT_NEAR(s.alpha_bar(t), prod, 1e-12);
  }
  EXPECT_DOUBLE_EQ(s.beta(1), 1e-4);
  EXPECT_DOUBLE_EQ(s.beta(200), 2e-2);
  EXPECT_THROW(s.beta(0), ContractError);
  EXPECT_THROW(NoiseSchedule(10, 0.5, 0.1), ConfigError);
}

TEST(QSample, Limits) {
  Rng rng(1);
  const TD z0 = random_tensor({2, 3, 4, 4}, rng), eps = random_tensor({2, 3, 4, 4}, rng);
  const auto tiny = NoiseSchedule::from_betas({1e-300});
  const TD near_z0 = q_sample(tiny, z0, 1, eps);
  for (std::size_t i = 0; i < z0.numel(); ++i) EXPECT_NEAR(near_z0[i], z0[i], 1e-12);
  const auto heavy = NoiseSchedule::from_betas(std::vector<double>(400, 0.5));
  const TD near_eps = q_sample(heavy, z0, 400, eps);
  for (std::size_t i = 0; i < z0.numel(); ++i) EXPECT_NEAR(near_eps[i], eps[i], 1e-12);
}

TEST(QSample, PerItemStepsMatchScalarForm) {
  Rng rng(2);
  const NoiseSchedule s(50);
  const TD z0 = random_tensor({2, 1, 2, 2}, rng), eps = random_tensor({2, 1, 2, 2}, rng);
  const TD both = q_sample(s, z0, std::vector<int>{3, 40}, eps);
  const TD a = q_sample(s, slice(z0, 0, 0, 1), 3, slice(eps, 0, 0, 1));
  const TD b = q_sample(s, slice(z0, 0, 1, 1), 40, slice(eps, 0, 1, 1));
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_DOUBLE_EQ(both[i], a[i]);
    EXPECT_DOUBLE_EQ(both[4 + i], b[i]);
  }
}

TEST(QSample, ClosedFormMatchesStepwiseChainInDistribution) {
  const NoiseSchedule s(30, 1e-3, 5e-2);
  Rng rng(3);
  const std::size_t n = 10000;
  const double z0 = 0.7;
  const int t = 30;
  double m = 0, m2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double z = z0;
    for (int k = 1; k <= t; ++k) z = std::sqrt(1.0 - s.beta(k)) * z + std::sqrt(s.beta(k)) * rng.normal();
    m += z;
    m2 += z * z;
  }
  m /= n;
  const double var = m2 / n - m * m;
  const double want_mean = std::sqrt(s.alpha_bar(t)) * z0, want_var = 1.0 - s.alpha_bar(t);
  EXPECT_NEAR(m, want_mean, 0.02 * std::sqrt(want_mean * want_mean + want_var));
  EXPECT_NEAR(var, want_var, 0.05 * want_var);
}

TEST(QSample, MonteCarloMoments) {
  for (const auto& r : verify::diffusion_checks(5)) EXPECT_TRUE(r.passed) << r.name << ": " << r.detail;
}

TEST(PSample, FinalStepIsDeterministicAndShapePreserving) {
  const NoiseSchedule s(20);
  Rng rng(4);
  const TD z = random_tensor({1, 3, 4, 4}, rng), eps = random_tensor({1, 3, 4, 4}, rng);
  Rng a(1), b(2);
  const TD x = p_sample_step(s, z, 1, eps, a), y = p_sample_step(s, z, 1, eps, b);
  EXPECT_EQ(x.values(), y.values());
  EXPECT_EQ(x.shape(), z.shape());
  Rng c(1), d(2);
  EXPECT_NE(p_sample_step(s, z, 5, eps, c).values(), p_sample_step(s, z, 5, eps, d).values());
}

TEST(Denoiser, ZeroInjectionEqualsPlainForward) {
  Rng rng(5);
  const Denoiser<double> net(small_denoiser(), rng);
  const TD z = random_tensor({2, 3, 8, 8}, rng);
  const std::vector<int> ts{3, 17}, cls{0, 2};
  const TD plain = net(z, ts, cls);
  Injection<double> zero;
  zero.levels = {TD::zeros({2, 8, 4, 4}), TD::zeros({2, 8, 2, 2})};
  zero.input = TD::zeros({2, 8, 4, 4});
  const TD injected = net(z, ts, cls, zero);
  EXPECT_EQ(plain.values(), injected.values());
  EXPECT_EQ(plain.shape(), z.shape());
  for (double v : plain.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Denoiser, InjectionGradientsMatchFiniteDifferences) {
  Rng rng(6);
  const Denoiser<double> net(small_denoiser(), rng);
  const TD z = random_tensor({1, 3, 8, 8}, rng), w = random_tensor({1, 3, 8, 8}, rng);
  Rng probe(7);
  const auto r = grad_check(
      [&](const std::vector<TD>& v) {
        Injection<double> inj;
        inj.levels = {v[0], v[1]};
        inj.input = v[2];
        return sum(mul(net(z, {5}, {1}, inj), w));
      },
      {random_tensor({1, 8, 4, 4}, rng), random_tensor({1, 8, 2, 2}, rng), random_tensor({1, 8, 4, 4}, rng)}, 100, probe);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Denoiser, DroppedClassZeroesClassEmbedding) {
  Rng rng(8);
  const Denoiser<double> net(small_denoiser(), rng);
  const TD dropped = net.embedding({4}, {-1}), time = net.time({4});
  EXPECT_EQ(dropped.values(), time.values());
  EXPECT_THROW(net.embedding({4}, {9}), LookupError);
}

TEST(Denoiser, RejectsWrongShapes) {
  Rng rng(9);
  const Denoiser<double> net(small_denoiser(), rng);
  EXPECT_THROW(net(TD::zeros({1, 3, 6, 6}), {1}, {0}), DimensionError);
  Injection<double> bad;
  bad.levels = {TD::zeros({1, 8, 2, 2}), TD::zeros({1, 8, 2, 2})};
  EXPECT_THROW(net(TD::zeros({1, 3, 8, 8}), {1}, {0}, bad), DimensionError);
}
