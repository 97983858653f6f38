#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dcctl/embeddings.hpp"
#include "dcctl/nn.hpp"
#include "dcctl/numerics/ops.hpp"
#include "dcctl/numerics/rng.hpp"

namespace dcctl {

/// Per-step noise coefficients. Steps are numbered 1..T; alpha_bar(0) = 1.
class NoiseSchedule {
 public:
  NoiseSchedule() : NoiseSchedule(200) {}
  explicit NoiseSchedule(int steps, double beta_start = 1e-4, double beta_end = 2e-2) {
    if (steps < 1) throw ConfigError("diffusion needs at least one step");
    if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1)) throw ConfigError("beta range must satisfy 0 < start <= end < 1");
    std::vector<double> betas(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i)
      betas[static_cast<std::size_t>(i)] =
          steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(steps - 1);
    init(std::move(betas));
  }

  static NoiseSchedule from_betas(std::vector<double> betas) {
    NoiseSchedule s(1);
    for (std::size_t i = 0; i < betas.size(); ++i)
      if (!(betas[i] > 0 && betas[i] < 1) || (i && betas[i] < betas[i - 1]))
        throw ConfigError("betas must be nondecreasing inside (0, 1)");
    if (betas.empty()) throw ConfigError("empty beta schedule");
    s.init(std::move(betas));
    return s;
  }

  int steps() const { return static_cast<int>(beta_.size()); }
  double beta(int t) const { return beta_[index(t)]; }
  double alpha(int t) const { return 1.0 - beta(t); }
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bar_[index(t)]; }

  /// Variance of q(z_{t-1} | z_t, z_0).
  double posterior_variance(int t) const {
    return beta(t) * (1.0 - alpha_bar(t - 1)) / (1.0 - alpha_bar(t));
  }

  void check_step(int t) const {
    if (t < 1 || t > steps())
      throw ContractError("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
  }

 private:
  void init(std::vector<double> betas) {
    beta_ = std::move(betas);
    alpha_bar_.resize(beta_.size());
    double prod = 1.0;
    for (std::size_t i = 0; i < beta_.size(); ++i) alpha_bar_[i] = prod *= 1.0 - beta_[i];
  }
  std::size_t index(int t) const {
    check_step(t);
    return static_cast<std::size_t>(t - 1);
  }

  std::vector<double> beta_, alpha_bar_;
};

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, with one step per batch item.
template <class T>
Tensor<T> q_sample(const NoiseSchedule& s, const Tensor<T>& z0, const std::vector<int>& ts, const Tensor<T>& eps) {
  if (z0.shape() != eps.shape()) throw DimensionError("q_sample: noise shape differs from z0");
  if (ts.size() != z0.dim(0)) throw DimensionError("q_sample: one step per batch item required");
  std::vector<T> a(ts.size()), b(ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    a[i] = static_cast<T>(std::sqrt(s.alpha_bar(ts[i])));
    b[i] = static_cast<T>(std::sqrt(1.0 - s.alpha_bar(ts[i])));
  }
  Shape coef_shape(z0.rank(), 1);
  coef_shape[0] = ts.size();
  return add(mul(z0, Tensor<T>::from(coef_shape, a)), mul(eps, Tensor<T>::from(coef_shape, b)));
}

template <class T>
Tensor<T> q_sample(const NoiseSchedule& s, const Tensor<T>& z0, int t, const Tensor<T>& eps) {
  s.check_step(t);
  const T a = static_cast<T>(std::sqrt(s.alpha_bar(t))), b = static_cast<T>(std::sqrt(1.0 - s.alpha_bar(t)));
  return add(scale(z0, a), scale(eps, b));
}

/// Mean of p(z_{t-1} | z_t) given the predicted noise.
template <class T>
Tensor<T> posterior_mean(const NoiseSchedule& s, const Tensor<T>& z_t, int t, const Tensor<T>& eps_hat) {
  const double c = s.beta(t) / std::sqrt(1.0 - s.alpha_bar(t));
  const double inv = 1.0 / std::sqrt(s.alpha(t));
  std::vector<T> out(z_t.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(inv * (static_cast<double>(z_t[i]) - c * static_cast<double>(eps_hat[i])));
  return Tensor<T>::from(z_t.shape(), std::move(out));
}

/// One ancestral step; no noise is added at t = 1.
template <class T>
Tensor<T> p_sample_step(const NoiseSchedule& s, const Tensor<T>& z_t, int t, const Tensor<T>& eps_hat, Rng& rng) {
  if (z_t.shape() != eps_hat.shape()) throw DimensionError("p_sample_step: prediction shape differs from z_t");
  Tensor<T> mean = posterior_mean(s, z_t, t, eps_hat);
  if (t == 1) return mean;
  const double sigma = std::sqrt(s.posterior_variance(t));
  auto out = mean.values();
  for (auto& v : out) v += static_cast<T>(sigma * rng.normal());
  return Tensor<T>::from(z_t.shape(), std::move(out));
}

struct DenoiserConfig {
  std::size_t image_channels = 3;
  std::size_t image_size = 32;
  std::size_t stem_width = 16;
  std::size_t width = 32;
  std::size_t emb_dim = 64;
  std::size_t num_classes = 4;
  std::vector<std::size_t> level_grid{16, 8, 8, 4};
  int steps = 200;
};

/// Feature maps added inside the denoiser: one per encoder level (optional) and
/// an extra term at the level-0 input.
template <class T>
struct Injection {
  std::vector<Tensor<T>> levels;  // [B, width, g, g] or undefined
  Tensor<T> input;                // [B, width, g0, g0] or undefined
};

/// Sinusoidal step features through a two-layer MLP.
template <class T>
struct TimeEmbedder {
  nn::Linear<T> fc1, fc2;
  std::size_t dim = 0;
  int steps = 0;

  TimeEmbedder() = default;
  TimeEmbedder(std::size_t dim_, int steps_, Rng& rng) : fc1(dim_, dim_, rng), fc2(dim_, dim_, rng), dim(dim_), steps(steps_) {}

  /// ts in [1, steps].
  Tensor<T> operator()(const std::vector<int>& ts) const {
    std::vector<int> zero_based(ts.size());
    for (std::size_t i = 0; i < ts.size(); ++i) zero_based[i] = ts[i] - 1;
    return fc2(silu(fc1(timestep_embedding<T>(zero_based, dim, steps))));
  }
  void collect(const std::string& prefix, nn::NamedParams<T>& out) const {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

/// Small U-shaped epsilon predictor with additive injection ports.
template <class T>
struct Denoiser {
  DenoiserConfig cfg;
  TimeEmbedder<T> time;
  Tensor<T> class_table;  // [num_classes, emb_dim]
  nn::Conv2d<T> stem;
  std::vector<nn::Conv2d<T>> down;  // used where the grid halves
  std::vector<nn::ResBlock<T>> enc;
  nn::ResBlock<T> mid;
  std::vector<nn::ResBlock<T>> dec;
  nn::GroupNorm<T> out_norm;
  nn::Conv2d<T> out_conv;

  Denoiser() = default;
  Denoiser(const DenoiserConfig& c, Rng& rng) : cfg(c) {
    if (c.level_grid.empty()) throw ConfigError("denoiser needs at least one level");
    std::size_t prev = c.image_size;
    for (auto g : c.level_grid) {
      if (g != prev && g * 2 != prev) throw ConfigError("each level grid must equal or halve the previous one");
      prev = g;
    }
    if (c.level_grid[0] * 2 != c.image_size) throw ConfigError("level 0 grid must be half the image size");
    Rng r = rng.fork(1);
    time = TimeEmbedder<T>(c.emb_dim, c.steps, r);
    class_table = nn::normal_param<T>({c.num_classes, c.emb_dim}, r, 1.0);
    stem = nn::Conv2d<T>(c.image_channels, c.stem_width, 3, 1, 1, r);
    std::size_t in = c.stem_width;
    prev = c.image_size;
    for (std::size_t i = 0; i < c.level_grid.size(); ++i) {
      const bool halves = c.level_grid[i] != prev;
      down.push_back(halves ? nn::Conv2d<T>(in, c.width, 3, 2, 1, r) : nn::Conv2d<T>());
      enc.emplace_back(halves ? c.width : in, c.width, c.emb_dim, r);
      in = c.width;
      prev = c.level_grid[i];
    }
    mid = nn::ResBlock<T>(c.width, c.width, c.emb_dim, r);
    for (std::size_t i = 0; i < c.level_grid.size(); ++i) dec.emplace_back(2 * c.width, c.width, c.emb_dim, r);
    out_norm = nn::GroupNorm<T>(c.width + c.stem_width, nn::default_groups(c.width + c.stem_width));
    out_conv = nn::Conv2d<T>(c.width + c.stem_width, c.image_channels, 3, 1, 1, r);
  }

  std::size_t levels() const { return cfg.level_grid.size(); }

  /// Time embedding plus class embedding; class id -1 means "dropped" (zero vector).
  Tensor<T> embedding(const std::vector<int>& ts, const std::vector<int>& classes) const {
    if (classes.size() != ts.size()) throw DimensionError("one class id per batch item required");
    std::vector<std::size_t> ids(classes.size());
    std::vector<T> keep(classes.size());
    for (std::size_t i = 0; i < classes.size(); ++i) {
      if (classes[i] >= static_cast<int>(cfg.num_classes)) throw LookupError("class id " + std::to_string(classes[i]) + " out of range");
      ids[i] = classes[i] < 0 ? 0 : static_cast<std::size_t>(classes[i]);
      keep[i] = classes[i] < 0 ? T(0) : T(1);
    }
    Tensor<T> cls = mul(take_rows(class_table, ids), Tensor<T>::from({classes.size(), 1}, keep));
    return add(time(ts), cls);
  }

  /// eps prediction for z_t [B, C, S, S].
  Tensor<T> operator()(const Tensor<T>& z_t, const std::vector<int>& ts, const std::vector<int>& classes,
                       const Injection<T>& inj = {}) const {
    if (z_t.rank() != 4 || z_t.dim(1) != cfg.image_channels || z_t.dim(2) != cfg.image_size || z_t.dim(3) != cfg.image_size)
      throw DimensionError("denoiser input shape " + to_string(z_t.shape()));
    if (ts.size() != z_t.dim(0)) throw DimensionError("one step per batch item required");
    if (!inj.levels.empty() && inj.levels.size() != levels())
      throw DimensionError("injection has " + std::to_string(inj.levels.size()) + " levels, denoiser has " + std::to_string(levels()));
    const std::size_t b = z_t.dim(0);
    auto check_port = [&](const Tensor<T>& f, std::size_t g, const std::string& what) {
      const Shape want{b, cfg.width, g, g};
      if (f.shape() != want) throw DimensionError(what + " shape " + to_string(f.shape()) + ", expected " + to_string(want));
    };
    const Tensor<T> emb = embedding(ts, classes);
    const Tensor<T> s = stem(z_t);
    Tensor<T> h = s;
    std::vector<Tensor<T>> skips;
    for (std::size_t i = 0; i < levels(); ++i) {
      if (down[i].kernel.defined()) h = down[i](h);
      if (i == 0 && inj.input.defined()) {
        check_port(inj.input, cfg.level_grid[0], "input injection");
        h = add(h, inj.input);
      }
      h = enc[i](h, emb);
      if (!inj.levels.empty() && inj.levels[i].defined()) {
        check_port(inj.levels[i], cfg.level_grid[i], "level " + std::to_string(i) + " injection");
        h = add(h, inj.levels[i]);
      }
      skips.push_back(h);
    }
    h = mid(h, emb);
    for (std::size_t i = levels(); i-- > 0;) {
      h = dec[i](concat<T>({h, skips[i]}, 1), emb);
      const std::size_t target = i == 0 ? cfg.image_size : cfg.level_grid[i - 1];
      if (target != cfg.level_grid[i]) h = upsample2x(h);
    }
    return out_conv(silu(out_norm(concat<T>({h, s}, 1))));
  }

  void collect(const std::string& prefix, nn::NamedParams<T>& out) const {
    time.collect(prefix + ".time", out);
    out.emplace_back(prefix + ".class_table", class_table);
    stem.collect(prefix + ".stem", out);
    for (std::size_t i = 0; i < levels(); ++i) {
      const std::string p = prefix + ".level" + std::to_string(i);
      if (down[i].kernel.defined()) down[i].collect(p + ".down", out);
      enc[i].collect(p + ".enc", out);
      dec[i].collect(p + ".dec", out);
    }
    mid.collect(prefix + ".mid", out);
    out_norm.collect(prefix + ".out_norm", out);
    out_conv.collect(prefix + ".out_conv", out);
  }
};

}  // namespace dcctl
