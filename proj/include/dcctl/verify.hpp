#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "dcctl/diffusion.hpp"
#include "dcctl/inter_element.hpp"
#include "dcctl/intra_element.hpp"
#include "dcctl/numerics/gradcheck.hpp"
#include "dcctl/training.hpp"

/// Self-checks of the numerical invariants. Each returns a result instead of
/// throwing so the CLI and the acceptance runner can report all of them.
namespace dcctl::verify {

struct Result {
  std::string name;
  bool passed = false;
  std::string detail;
  int criterion = 0;
};

namespace detail {

using TD = Tensor<double>;
using Inputs = std::vector<TD>;

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

inline TD rand_t(Shape s, Rng& rng, double sd = 1.0) { return random_tensor(std::move(s), rng, sd); }

/// sum(y * R) with a fixed random R so every output coordinate has its own upstream gradient.
inline TD projected(const TD& y, std::uint64_t seed) {
  Rng r(seed, 0x70726f6a);
  return sum(mul(y, random_tensor(y.shape(), r)));
}

/// Inputs followed by every parameter of the module; parameters are shared handles,
/// so perturbing them inside grad_check perturbs the module.
inline Inputs with_params(Inputs in, const nn::NamedParams<double>& params) {
  for (const auto& [name, p] : params) in.push_back(p);
  return in;
}

inline void randomize(const nn::NamedParams<double>& params, Rng& rng, double sd = 0.3) {
  for (const auto& [name, p] : params) {
    TD t = p;
    for (auto& v : t.mutable_data()) v += sd * rng.normal();
  }
}

struct GradCase {
  std::string name;
  std::function<TD(const Inputs&)> loss;
  Inputs inputs;
};

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.width = 8;
  c.emb_dim = 8;
  c.stem_width = 8;
  c.ffn_ratio = 2;
  c.level_grid = {4, 2};
  c.image_size = 8;
  return c;
}

inline std::vector<GradCase> grad_cases(Rng& rng) {
  std::vector<GradCase> cases;
  cases.push_back({"attention", [](const Inputs& v) { return projected(scaled_dot_attention(v[0], v[1], v[2]), 1); },
                   {rand_t({2, 4, 6}, rng), rand_t({2, 5, 6}, rng), rand_t({2, 5, 3}, rng)}});
  cases.push_back({"rope_2d",
                   [](const Inputs& v) { return projected(rope_apply_2d(v[0], grid_positions(2, 3), 10.0), 2); },
                   {rand_t({2, 6, 8}, rng)}});
  cases.push_back({"rope_1d", [](const Inputs& v) { return projected(rope_apply_1d(v[0], {0, 1, 2}, 10.0), 3); },
                   {rand_t({4, 3, 6}, rng)}});
  cases.push_back({"conv2d", [](const Inputs& v) { return projected(conv2d(v[0], v[1], v[2], 2, 1), 4); },
                   {rand_t({2, 3, 5, 5}, rng), rand_t({4, 3, 3, 3}, rng), rand_t({4}, rng)}});
  {
    auto block = std::make_shared<nn::ResBlock<double>>(4, 8, 6, rng);
    nn::NamedParams<double> ps;
    block->collect("res", ps);
    randomize(ps, rng);
    cases.push_back({"resblock", [block](const Inputs& v) { return projected((*block)(v[0], v[1]), 5); },
                     with_params({rand_t({2, 4, 4, 4}, rng), rand_t({2, 6}, rng)}, ps)});
  }
  cases.push_back({"cross_normalize", [](const Inputs& v) { return projected(cross_normalize(v[0], v[1]), 6); },
                   {rand_t({2, 6, 4}, rng), rand_t({2, 9, 4}, rng, 2.0)}});
  const ModelConfig cfg = tiny_config();
  {
    auto sp = std::make_shared<SpatialReweigh<double>>(cfg, 2, rng);
    nn::NamedParams<double> ps;
    sp->collect("spatial", ps);
    randomize(ps, rng);  // the zero-initialized head would hide the body's gradients
    cases.push_back({"spatial_reweigh",
                     [sp](const Inputs& v) { return projected((*sp)(StackedFeatures<double>{v[0], {0, 1}}).features.x, 7); },
                     with_params({rand_t({1, 2, 4, 8}, rng)}, ps)});
  }
  {
    auto lr = std::make_shared<LayerReweigh<double>>(cfg, rng);
    nn::NamedParams<double> ps;
    lr->collect("layer", ps);
    randomize(ps, rng);
    cases.push_back({"layer_reweigh",
                     [lr](const Inputs& v) { return projected((*lr)(StackedFeatures<double>{v[0], {0, 1, 2}}).features.x, 8); },
                     with_params({rand_t({1, 3, 4, 8}, rng)}, ps)});
  }
  {
    auto block = std::make_shared<LayoutBlock<double>>(cfg, 1, rng);
    nn::NamedParams<double> ps;
    block->collect("layout", ps);
    randomize(ps, rng, 0.1);
    cases.push_back({"layout_block",
                     [block](const Inputs& v) {
                       const auto out = (*block)(v[0], v[1], v[2]);
                       return add(projected(out.f_next, 9), projected(out.h_prime, 10));
                     },
                     with_params({rand_t({1, 8, 4, 4}, rng), rand_t({1, 8, 8}, rng), rand_t({1, 8}, rng)}, ps)});
  }
  {
    Rng mr(11);
    std::vector<double> mask(2 * 16);
    for (auto& m : mask) m = mr.bernoulli(0.3) ? 1.0 : 0.0;
    const TD m = foreground_weight_mask(TD::from({2, 1, 4, 4}, mask));
    cases.push_back({"mse_loss", [m](const Inputs& v) { return mse_loss(v[0], v[1], m); },
                     {rand_t({2, 3, 4, 4}, rng), rand_t({2, 3, 4, 4}, rng)}});
    const TD target0 = rand_t({2, 16, 4}, rng), target1 = rand_t({2, 4, 4}, rng);
    cases.push_back({"transform_loss",
                     [m, target0, target1](const Inputs& v) {
                       FeaturePyramid<double> h, t;
                       h.levels = {v[0], v[1]};
                       t.levels = {target0, target1};
                       return transform_loss(h, t, m);
                     },
                     {rand_t({2, 16, 4}, rng), rand_t({2, 4, 4}, rng)}});
  }
  cases.push_back({"layer_norm", [](const Inputs& v) { return projected(layer_norm(v[0], v[1], v[2]), 12); },
                   {rand_t({3, 6}, rng), rand_t({6}, rng), rand_t({6}, rng)}});
  cases.push_back({"group_norm", [](const Inputs& v) { return projected(group_norm(v[0], 2, v[1], v[2]), 13); },
                   {rand_t({2, 4, 3, 3}, rng), rand_t({4}, rng), rand_t({4}, rng)}});
  cases.push_back({"softmax", [](const Inputs& v) { return projected(softmax(v[0], 1), 14); }, {rand_t({3, 4, 2}, rng)}});
  cases.push_back({"linear", [](const Inputs& v) { return projected(linear(v[0], v[1], v[2]), 15); },
                   {rand_t({2, 3, 4}, rng), rand_t({4, 5}, rng), rand_t({5}, rng)}});
  cases.push_back({"activations", [](const Inputs& v) { return projected(add(add(silu(v[0]), gelu(v[0])), sigmoid(v[0])), 16); },
                   {rand_t({40}, rng, 2.0)}});
  return cases;
}

}  // namespace detail

/// Every differentiable op against central finite differences in double precision.
inline std::vector<Result> gradient_checks(std::uint64_t seed, std::size_t probes = 100) {
  Rng rng(seed, 0x67726164);
  std::vector<Result> out;
  for (auto& c : detail::grad_cases(rng)) {
    Rng probe_rng(seed, 0x70726f62 + out.size());
    const auto r = grad_check(c.loss, c.inputs, probes, probe_rng);
    out.push_back({"gradient." + c.name, r.probes >= probes && r.max_rel_error < 1e-4,
                   std::to_string(r.probes) + " probes, max rel err " + detail::fmt(r.max_rel_error), 1});
  }
  return out;
}

/// Reweighing identities at initialization.
inline std::vector<Result> reweigh_checks(std::uint64_t seed) {
  std::vector<Result> out;
  Rng rng(seed, 0x72657765);
  const ModelConfig cfg = detail::tiny_config();
  {
    const SpatialReweigh<double> sp(cfg, 2, rng);
    const detail::TD x = detail::rand_t({2, 3, 4, 8}, rng);
    const auto y = sp(StackedFeatures<double>{x, {0, 1, 2}});
    bool exact = true;
    for (std::size_t i = 0; i < x.numel(); ++i) exact = exact && y.features.x[i] == 0.5 * x[i];
    out.push_back({"reweigh.spatial_init_half", exact, exact ? "output is 0.5 x bit for bit" : "output differs from 0.5 x", 2});
  }
  {
    const LayerReweigh<double> lr(cfg, rng);
    const detail::TD x = detail::rand_t({2, 1, 4, 8}, rng);
    const auto y = lr(StackedFeatures<double>{x, {0}});
    bool exact = true;
    for (std::size_t i = 0; i < x.numel(); ++i) exact = exact && y.features.x[i] == x[i];
    out.push_back({"reweigh.single_layer_identity", exact, exact ? "output equals x bit for bit" : "output differs from x", 2});
  }
  {
    double worst = 0;
    for (std::size_t layers = 2; layers <= 5; ++layers) {
      LayerReweigh<float> lr(cfg, rng);
      std::vector<std::int64_t> orders(layers);
      for (std::size_t i = 0; i < layers; ++i) orders[i] = static_cast<std::int64_t>(i);
      const auto x = Tensor<float>::from({2, layers, 4, 8}, rng.normal_vector<float>(2 * layers * 32, 3.0));
      const auto w = lr(StackedFeatures<float>{x, orders}).weights;
      for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t n = 0; n < 4; ++n) {
          double s = 0;
          for (std::size_t l = 0; l < layers; ++l) s += w[(b * layers + l) * 4 + n];
          worst = std::max(worst, std::abs(s - 1.0));
        }
    }
    out.push_back({"reweigh.layer_weights_sum_to_one", worst <= 1e-6, "max |sum - 1| = " + detail::fmt(worst), 2});
  }
  return out;
}

/// Output statistics of cross_normalize against a long-double reference.
inline std::vector<Result> cross_normalize_checks(std::uint64_t seed, std::size_t cases = 1000) {
  Rng rng(seed, 0x63726f73);
  auto stats = [](const std::vector<double>& v, std::size_t b, std::size_t tokens, std::size_t c, std::size_t bi, std::size_t ch) {
    long double mu = 0, var = 0;
    for (std::size_t t = 0; t < tokens; ++t) mu += v[(bi * tokens + t) * c + ch];
    mu /= static_cast<long double>(tokens);
    for (std::size_t t = 0; t < tokens; ++t) {
      const long double d = v[(bi * tokens + t) * c + ch] - mu;
      var += d * d;
    }
    (void)b;
    return std::pair<long double, long double>{mu, std::sqrt(var / static_cast<long double>(tokens))};
  };
  double worst = 0;
  for (std::size_t k = 0; k < cases; ++k) {
    const std::size_t b = 1 + rng.below(3), n = 2 + rng.below(20), m = 2 + rng.below(20), c = 1 + rng.below(6);
    const double sp = std::exp(rng.uniform(-2.0, 2.0)), sr = std::exp(rng.uniform(-2.0, 2.0));
    const detail::TD hp = add_scalar(detail::rand_t({b, n, c}, rng, sp), rng.uniform(-5.0, 5.0));
    const detail::TD hr = add_scalar(detail::rand_t({b, m, c}, rng, sr), rng.uniform(-5.0, 5.0));
    const detail::TD y = cross_normalize(hp, hr);
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const auto [mu_y, sd_y] = stats(y.values(), b, n, c, bi, ch);
        const auto [mu_r, sd_r] = stats(hr.values(), b, m, c, bi, ch);
        worst = std::max({worst, static_cast<double>(std::abs(mu_y - mu_r)), static_cast<double>(std::abs(sd_y - sd_r))});
      }
  }
  std::vector<Result> out;
  out.push_back({"cross_normalize.statistics", worst < 1e-5,
                 std::to_string(cases) + " cases, max stat error " + detail::fmt(worst), 3});

  bool finite = true;
  double worst_const = 0;
  for (std::size_t k = 0; k < 20; ++k) {
    const std::size_t b = 1 + rng.below(2), n = 1 + rng.below(10), m = 2 + rng.below(10), c = 1 + rng.below(4);
    std::vector<double> constant(b * n * c);
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t t = 0; t < n; ++t)
        for (std::size_t ch = 0; ch < c; ++ch) constant[(bi * n + t) * c + ch] = static_cast<double>(ch) - 1.5;
    const detail::TD hr = detail::rand_t({b, m, c}, rng, 2.0);
    const detail::TD y = cross_normalize(detail::TD::from({b, n, c}, constant), hr);
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const auto mu_r = stats(hr.values(), b, m, c, bi, ch).first;
        for (std::size_t t = 0; t < n; ++t) {
          const double v = y[(bi * n + t) * c + ch];
          finite = finite && std::isfinite(v);
          worst_const = std::max(worst_const, static_cast<double>(std::abs(v - mu_r)));
        }
      }
  }
  out.push_back({"cross_normalize.constant_input", finite && worst_const < 1e-5,
                 std::string(finite ? "finite" : "non-finite output") + ", max |y - mean(ref)| = " + detail::fmt(worst_const), 3});
  return out;
}

/// Foreground weight mask identities.
inline std::vector<Result> mask_weight_checks(std::uint64_t seed) {
  std::vector<Result> out;
  const std::size_t s = 16, area = s * s;
  {
    const auto m = foreground_weight_mask(detail::TD::from({1, 1, s, s}, std::vector<double>(area, 1.0)));
    bool ones = true;
    for (double v : m.values()) ones = ones && v == 1.0;
    out.push_back({"mask.full_foreground", ones, ones ? "all weights 1" : "weights differ from 1", 4});
  }
  {
    std::vector<double> q(area, 0.0);
    for (std::size_t r = 0; r < s / 2; ++r)
      for (std::size_t c = 0; c < s / 2; ++c) q[r * s + c] = 1.0;
    const auto m = foreground_weight_mask(detail::TD::from({1, 1, s, s}, q));
    bool ok = true;
    for (std::size_t i = 0; i < area; ++i) ok = ok && m[i] == (q[i] != 0 ? 4.0 : 1.0);
    out.push_back({"mask.quarter_foreground", ok, ok ? "foreground weight 4, background 1" : "unexpected weights", 4});
  }
  {
    Rng rng(seed, 0x6d61736b);
    double worst = 0;
    for (int k = 0; k < 200; ++k) {
      const double p = rng.uniform(0.01, 1.0);
      std::vector<double> v(area);
      bool any = false;
      for (auto& x : v) any = (x = rng.bernoulli(p) ? 1.0 : 0.0) != 0 || any;
      if (!any) v[rng.below(area)] = 1.0;
      const auto m = foreground_weight_mask(detail::TD::from({1, 1, s, s}, v));
      double fg = 0;
      for (std::size_t i = 0; i < area; ++i)
        if (v[i] != 0) fg += m[i];
      worst = std::max(worst, std::abs(fg - static_cast<double>(area)));
    }
    out.push_back({"mask.foreground_sum_is_area", worst <= 1e-9, "max |sum - area| = " + detail::fmt(worst), 4});
  }
  return out;
}

/// Forward-process moments and the reverse-step mean.
inline std::vector<Result> diffusion_checks(std::uint64_t seed) {
  std::vector<Result> out;
  const NoiseSchedule sched(200, 1e-4, 2e-2);
  Rng rng(seed, 0x64696666);
  const std::size_t draws = 10000, dims = 3 * 8 * 8;
  const detail::TD z0 = detail::rand_t({1, 3, 8, 8}, rng);
  double worst_mean = 0, worst_var = 0;
  for (int t : {1, 20, 100, 200}) {
    // Pool over coordinates: regress z_t on z0 for the mean coefficient; the residual gives the variance.
    long double zz = 0, zx = 0, rr = 0;
    const std::size_t chunk = 500;
    for (std::size_t d = 0; d < draws; d += chunk) {
      const detail::TD eps = detail::rand_t({chunk, 3, 8, 8}, rng);
      std::vector<double> rep;
      rep.reserve(chunk * dims);
      for (std::size_t i = 0; i < chunk; ++i) rep.insert(rep.end(), z0.values().begin(), z0.values().end());
      const detail::TD zt = q_sample(sched, detail::TD::from({chunk, 3, 8, 8}, rep), std::vector<int>(chunk, t), eps);
      for (std::size_t i = 0; i < zt.numel(); ++i) {
        zz += static_cast<long double>(rep[i]) * rep[i];
        zx += static_cast<long double>(rep[i]) * zt[i];
      }
      const double a = std::sqrt(sched.alpha_bar(t));
      for (std::size_t i = 0; i < zt.numel(); ++i) {
        const long double r = zt[i] - a * rep[i];
        rr += r * r;
      }
    }
    const double slope = static_cast<double>(zx / zz), var = static_cast<double>(rr / static_cast<long double>(draws * dims));
    const double a = std::sqrt(sched.alpha_bar(t)), v = 1.0 - sched.alpha_bar(t);
    worst_mean = std::max(worst_mean, std::abs(slope - a) / a);
    worst_var = std::max(worst_var, std::abs(var - v) / v);
  }
  out.push_back({"diffusion.q_sample_moments", worst_mean < 0.02 && worst_var < 0.02,
                 std::to_string(draws) + " draws, mean rel err " + detail::fmt(worst_mean) + ", var rel err " + detail::fmt(worst_var), 5});

  double worst = 0;
  for (int t = 1; t <= sched.steps(); ++t) {
    const detail::TD x0 = detail::rand_t({1, 3, 4, 4}, rng), eps = detail::rand_t({1, 3, 4, 4}, rng);
    const detail::TD zt = q_sample(sched, x0, t, eps);
    Rng step_rng(seed, static_cast<std::uint64_t>(t)), replay = step_rng;
    const detail::TD next = p_sample_step(sched, zt, t, eps, step_rng);
    const double ab = sched.alpha_bar(t), ab_prev = sched.alpha_bar(t - 1), beta = sched.beta(t);
    const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab), ct = std::sqrt(sched.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab);
    const double sigma = t == 1 ? 0.0 : std::sqrt(sched.posterior_variance(t));
    for (std::size_t i = 0; i < x0.numel(); ++i) {
      const double noise = t == 1 ? 0.0 : sigma * replay.normal();
      worst = std::max(worst, std::abs(next[i] - noise - (c0 * x0[i] + ct * zt[i])));
    }
  }
  out.push_back({"diffusion.p_sample_posterior_mean", worst < 1e-10, "max |mean - posterior| = " + detail::fmt(worst), 5});
  return out;
}

/// softmax(q k^T / sqrt(d)) v by explicit loops in long double.
inline std::vector<double> brute_attention(const detail::TD& q, const detail::TD& k, const detail::TD& v) {
  const std::size_t b = q.dim(0), nq = q.dim(1), nk = k.dim(1), d = q.dim(2), dv = v.dim(2);
  std::vector<double> out(b * nq * dv);
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t i = 0; i < nq; ++i) {
      std::vector<long double> s(nk);
      long double mx = -1e300L, z = 0;
      for (std::size_t j = 0; j < nk; ++j) {
        long double dot = 0;
        for (std::size_t e = 0; e < d; ++e) dot += static_cast<long double>(q[(bi * nq + i) * d + e]) * k[(bi * nk + j) * d + e];
        s[j] = dot / std::sqrt(static_cast<long double>(d));
        mx = std::max(mx, s[j]);
      }
      for (auto& x : s) z += (x = std::exp(x - mx));
      for (std::size_t e = 0; e < dv; ++e) {
        long double acc = 0;
        for (std::size_t j = 0; j < nk; ++j) acc += s[j] / z * v[(bi * nk + j) * dv + e];
        out[(bi * nq + i) * dv + e] = static_cast<double>(acc);
      }
    }
  return out;
}

/// Every attention path in the model against the brute-force formula.
inline std::vector<Result> attention_checks(std::uint64_t seed) {
  Rng rng(seed, 0x6174746e);
  double worst = 0;
  auto compare = [&worst](const detail::TD& got, const std::vector<double>& ref) {
    for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(got[i] - ref[i]));
  };
  const ModelConfig cfg = detail::tiny_config();
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t nq = 1 + rng.below(8), nk = 1 + rng.below(8), d = 4 * (1 + rng.below(3));
    const detail::TD q = detail::rand_t({2, nq, d}, rng, 2.0), k = detail::rand_t({2, nk, d}, rng, 2.0), v = detail::rand_t({2, nk, 5}, rng);
    compare(nn::attention(q, k, v), brute_attention(q, k, v));
  }
  {
    const RotaryAttention<double> ra(8, cfg.rope_base, rng);
    const auto qpos = grid_positions(2, 3), kpos = grid_positions(2, 4);
    const detail::TD x = detail::rand_t({2, 6, 8}, rng), ctx = detail::rand_t({2, 8, 8}, rng);
    const detail::TD q = rope_apply_2d(ra.q(x), qpos, ra.base), k = rope_apply_2d(ra.k(ctx), kpos, ra.base), v = ra.v(ctx);
    compare(ra(x, qpos, ctx, kpos), ra.o(detail::TD::from({2, 6, 8}, brute_attention(q, k, v))).values());
  }
  {
    ReweighTransformer<double> body(8, 2, rng, false);
    const detail::TD x = detail::rand_t({3, 4, 8}, rng);
    const std::vector<std::int64_t> orders{0, 1, 2, 3};
    auto rot = [&](const detail::TD& t) { return rope_apply_1d(t, orders, cfg.rope_base); };
    const detail::TD a = body.ln1(x);
    const detail::TD att = detail::TD::from({3, 4, 8}, brute_attention(rot(body.q(a)), rot(body.k(a)), body.v(a)));
    detail::TD xp = add(x, att);
    xp = add(xp, body.ffn(body.ln2(xp)));
    compare(body.logits(x, rot), body.head(xp).values());
  }
  return {{"attention.brute_force", worst < 1e-10, "max |diff| = " + detail::fmt(worst), 6}};
}

inline std::vector<Result> run_all(std::uint64_t seed) {
  std::vector<Result> all;
  for (auto part : {gradient_checks(seed), reweigh_checks(seed), cross_normalize_checks(seed), mask_weight_checks(seed),
                    diffusion_checks(seed), attention_checks(seed)})
    all.insert(all.end(), part.begin(), part.end());
  return all;
}

}  // namespace dcctl::verify
