#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dcctl/numerics/ops.hpp"
#include "dcctl/numerics/rng.hpp"

namespace dcctl::nn {

/// Flat, ordered list of (qualified name, parameter) pairs.
template <class T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

template <class T>
Tensor<T> normal_param(Shape shape, Rng& rng, double stddev) {
  std::vector<T> v = rng.normal_vector<T>(numel_of(shape), stddev);
  return Tensor<T>::from(std::move(shape), std::move(v), true);
}

template <class T>
Tensor<T> const_param(Shape shape, T value) {
  return Tensor<T>::full(std::move(shape), value, true);
}

template <class T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool zero_init = false, bool with_bias = true) {
    weight = zero_init ? const_param<T>({in, out}, T(0))
                       : normal_param<T>({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
    if (with_bias) bias = const_param<T>({out}, T(0));
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
  }
};

template <class T>
struct Conv2d {
  Tensor<T> kernel;  // [out, in, k, k]
  Tensor<T> bias;    // [out]
  std::size_t stride = 1;
  std::size_t padding = 0;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t k, std::size_t stride_, std::size_t pad, Rng& rng,
         bool zero_init = false)
      : stride(stride_), padding(pad) {
    const double fan_in = static_cast<double>(in * k * k);
    kernel = zero_init ? const_param<T>({out, in, k, k}, T(0))
                       : normal_param<T>({out, in, k, k}, rng, 1.0 / std::sqrt(fan_in));
    bias = const_param<T>({out}, T(0));
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, kernel, bias, stride, padding); }
  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".kernel", kernel);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma, beta;
  LayerNorm() = default;
  explicit LayerNorm(std::size_t width)
      : gamma(const_param<T>({width}, T(1))), beta(const_param<T>({width}, T(0))) {}
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }
  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
};

template <class T>
struct GroupNorm {
  Tensor<T> gamma, beta;
  std::size_t groups = 1;
  GroupNorm() = default;
  GroupNorm(std::size_t channels, std::size_t groups_)
      : gamma(const_param<T>({channels}, T(1))), beta(const_param<T>({channels}, T(0))), groups(groups_) {}
  Tensor<T> operator()(const Tensor<T>& x) const { return group_norm(x, groups, gamma, beta); }
  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
};

inline std::size_t default_groups(std::size_t channels) {
  for (std::size_t g : {8u, 4u, 2u})
    if (channels % g == 0) return g;
  return 1;
}

/// [B, C, H, W] -> [B, H*W, C]
template <class T>
Tensor<T> to_tokens(const Tensor<T>& x) {
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  return reshape(permute(x, {0, 2, 3, 1}), {b, h * w, c});
}

/// [B, H*W, C] -> [B, C, H, W]
template <class T>
Tensor<T> from_tokens(const Tensor<T>& x, std::size_t h, std::size_t w) {
  const std::size_t b = x.dim(0), c = x.dim(2);
  if (x.dim(1) != h * w) throw DimensionError("token count does not match grid " + std::to_string(h) + "x" + std::to_string(w));
  return permute(reshape(x, {b, h, w, c}), {0, 3, 1, 2});
}

/// softmax(q k^T / sqrt(d)) v for q [B,Nq,D], k [B,Nk,D], v [B,Nk,Dv].
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  return scaled_dot_attention(q, k, v);
}

/// Two-layer MLP with GELU, hidden width = ratio * width.
template <class T>
struct FeedForward {
  Linear<T> up, down;
  FeedForward() = default;
  FeedForward(std::size_t width, std::size_t ratio, Rng& rng)
      : up(width, width * ratio, rng), down(width * ratio, width, rng) {}
  Tensor<T> operator()(const Tensor<T>& x) const { return down(gelu(up(x))); }
  void collect(const std::string& prefix, NamedParams<T>& out) const {
    up.collect(prefix + ".up", out);
    down.collect(prefix + ".down", out);
  }
};

/// GroupNorm-SiLU-Conv twice with an embedding added between, plus a skip path.
template <class T>
struct ResBlock {
  GroupNorm<T> norm1, norm2;
  Conv2d<T> conv1, conv2;
  Linear<T> emb_proj;
  Conv2d<T> skip;  // only when channel counts differ
  bool has_skip = false;

  ResBlock() = default;
  ResBlock(std::size_t in, std::size_t out, std::size_t emb_dim, Rng& rng)
      : norm1(in, default_groups(in)),
        norm2(out, default_groups(out)),
        conv1(in, out, 3, 1, 1, rng),
        conv2(out, out, 3, 1, 1, rng),
        emb_proj(emb_dim, out, rng) {
    if (in != out) {
      skip = Conv2d<T>(in, out, 1, 1, 0, rng);
      has_skip = true;
    }
  }

  /// x [B, Cin, H, W]; emb [B, E]
  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& emb) const {
    Tensor<T> h = conv1(silu(norm1(x)));
    const std::size_t b = x.dim(0);
    Tensor<T> e = reshape(emb_proj(silu(emb)), {b, h.dim(1), 1, 1});
    h = add(h, e);
    h = conv2(silu(norm2(h)));
    return add(has_skip ? skip(x) : x, h);
  }
  void collect(const std::string& prefix, NamedParams<T>& out) const {
    norm1.collect(prefix + ".norm1", out);
    norm2.collect(prefix + ".norm2", out);
    conv1.collect(prefix + ".conv1", out);
    conv2.collect(prefix + ".conv2", out);
    emb_proj.collect(prefix + ".emb", out);
    if (has_skip) skip.collect(prefix + ".skip", out);
  }
};

}  // namespace dcctl::nn
