#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "dcctl/embeddings.hpp"
#include "dcctl/intra_element.hpp"
#include "dcctl/model_config.hpp"
#include "dcctl/nn.hpp"

namespace dcctl {

/// x [B, L, N, C] with the layer order of each slot (0 = bottom).
template <class T>
struct StackedFeatures {
  Tensor<T> x;
  std::vector<std::int64_t> orders;
};

/// Element features paired with their occlusion order.
template <class T>
struct OrderedPyramid {
  FeaturePyramid<T> pyramid;
  int order = 0;
};

/// Sorts elements bottom-to-top and stacks them along a new layer axis, per level.
template <class T>
std::vector<StackedFeatures<T>> sort_and_stack(const std::vector<OrderedPyramid<T>>& elements) {
  if (elements.empty()) throw ContractError("sort_and_stack needs at least one element");
  std::vector<std::size_t> idx(elements.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return elements[a].order < elements[b].order; });
  for (std::size_t i = 1; i < idx.size(); ++i)
    if (elements[idx[i]].order == elements[idx[i - 1]].order)
      throw ContractError("duplicate layer order " + std::to_string(elements[idx[i]].order));
  const std::size_t levels = elements[0].pyramid.size();
  for (const auto& e : elements)
    if (e.pyramid.size() != levels) throw DimensionError("element pyramids have different level counts");
  std::vector<StackedFeatures<T>> out(levels);
  for (std::size_t l = 0; l < levels; ++l) {
    std::vector<Tensor<T>> parts;
    for (std::size_t i : idx) {
      const Tensor<T>& f = elements[i].pyramid[l];
      if (f.rank() != 3 || f.shape() != elements[idx[0]].pyramid[l].shape())
        throw DimensionError("level " + std::to_string(l) + " features disagree across elements");
      parts.push_back(reshape(f, {f.dim(0), 1, f.dim(1), f.dim(2)}));
    }
    out[l].x = parts.size() == 1 ? parts[0] : concat(parts, 1);
    out[l].orders.resize(idx.size());
    std::iota(out[l].orders.begin(), out[l].orders.end(), 0);
  }
  return out;
}

/// LayerNorm, q/k/v, rotary q/k, residual attention, residual FFN; then a
/// linear head to one logit per token. Shared body of both reweighing stages.
template <class T>
struct ReweighTransformer {
  nn::LayerNorm<T> ln1, ln2;
  nn::Linear<T> q, k, v;
  nn::FeedForward<T> ffn;
  nn::Linear<T> head;  // C -> 1

  ReweighTransformer() = default;
  ReweighTransformer(std::size_t width, std::size_t ffn_ratio, Rng& rng, bool zero_head)
      : ln1(width),
        ln2(width),
        q(width, width, rng, false, false),
        k(width, width, rng, false, false),
        v(width, width, rng, false, false),
        ffn(width, ffn_ratio, rng),
        head(width, 1, rng, zero_head) {}

  /// x [G, S, C] -> logits [G, S, 1]; `rotate` applies the positional rotation to q and k.
  template <class Rotate>
  Tensor<T> logits(const Tensor<T>& x, Rotate&& rotate) const {
    Tensor<T> a = ln1(x);
    Tensor<T> xp = add(x, nn::attention(rotate(q(a)), rotate(k(a)), v(a)));
    xp = add(xp, ffn(ln2(xp)));
    return head(xp);
  }

  void collect(const std::string& prefix, nn::NamedParams<T>& out) const {
    ln1.collect(prefix + ".ln1", out);
    ln2.collect(prefix + ".ln2", out);
    q.collect(prefix + ".q", out);
    k.collect(prefix + ".k", out);
    v.collect(prefix + ".v", out);
    ffn.collect(prefix + ".ffn", out);
    head.collect(prefix + ".head", out);
  }
};

template <class T>
struct Reweighed {
  StackedFeatures<T> features;
  Tensor<T> weights;  // [B, L, N, 1]
};

/// Per-token sigmoid gate computed within each layer (layers folded into the batch).
template <class T>
struct SpatialReweigh {
  ReweighTransformer<T> body;
  std::size_t grid = 0;
  double rope_base = 10000.0;

  SpatialReweigh() = default;
  SpatialReweigh(const ModelConfig& cfg, std::size_t grid_, Rng& rng) : body(cfg.width, cfg.ffn_ratio, rng, /*zero_head=*/true), grid(grid_), rope_base(cfg.rope_base) {}

  Reweighed<T> operator()(const StackedFeatures<T>& in) const {
    const Tensor<T>& x = in.x;
    if (x.rank() != 4) throw DimensionError("spatial_reweigh expects [B,L,N,C]");
    const std::size_t b = x.dim(0), l = x.dim(1), n = x.dim(2), c = x.dim(3);
    if (n != grid * grid) throw DimensionError("spatial_reweigh: token count does not match the level grid");
    const auto pos = grid_positions(grid, grid);
    const Tensor<T> folded = reshape(x, {b * l, n, c});
    const Tensor<T> w = sigmoid(body.logits(folded, [&](const Tensor<T>& t) { return rope_apply_2d(t, pos, rope_base); }));
    Reweighed<T> out;
    out.weights = reshape(w, {b, l, n, 1});
    out.features = {reshape(mul(folded, w), {b, l, n, c}), in.orders};
    return out;
  }
  void collect(const std::string& prefix, nn::NamedParams<T>& out) const { body.collect(prefix, out); }
};

/// Per-token softmax over layers, with 1-d rotary order embedding across the layer axis.
template <class T>
struct LayerReweigh {
  ReweighTransformer<T> body;
  double rope_base = 10000.0;
  bool order_embedding = true;
  mutable std::size_t rotations = 0;  // order-embedding applications

  LayerReweigh() = default;
  LayerReweigh(const ModelConfig& cfg, Rng& rng) : body(cfg.width, cfg.ffn_ratio, rng, /*zero_head=*/false), rope_base(cfg.rope_base), order_embedding(cfg.order_embedding) {}

  Reweighed<T> operator()(const StackedFeatures<T>& in) const {
    const Tensor<T>& x = in.x;
    if (x.rank() != 4) throw DimensionError("layer_reweigh expects [B,L,N,C]");
    const std::size_t b = x.dim(0), l = x.dim(1), n = x.dim(2), c = x.dim(3);
    if (in.orders.size() != l) throw DimensionError("layer_reweigh: one order id per layer required");
    const Tensor<T> folded = reshape(permute(x, {0, 2, 1, 3}), {b * n, l, c});
    auto rotate = [&](const Tensor<T>& t) {
      if (!order_embedding) return t;
      ++rotations;
      return rope_apply_1d(t, in.orders, rope_base);
    };
    const Tensor<T> w = softmax(body.logits(folded, rotate), 1);
    Reweighed<T> out;
    out.weights = permute(reshape(w, {b, n, l, 1}), {0, 2, 1, 3});
    out.features = {permute(reshape(mul(folded, w), {b, n, l, c}), {0, 2, 1, 3}), in.orders};
    return out;
  }
  void collect(const std::string& prefix, nn::NamedParams<T>& out) const { body.collect(prefix, out); }
};

/// Sum over the layer axis: [B, L, N, C] -> [B, N, C].
template <class T>
Tensor<T> fuse(const StackedFeatures<T>& s) {
  if (s.x.rank() != 4) throw DimensionError("fuse expects [B,L,N,C]");
  return sum_axis(s.x, 1);
}

/// How many times each stage ran; lets tests prove an ablated stage was bypassed.
struct InterCallCounts {
  std::size_t spatial = 0;
  std::size_t layer = 0;
};

/// Occlusion-aware fusion of several elements' transformed features.
template <class T>
struct InterElementController {
  std::vector<SpatialReweigh<T>> spatial;
  std::vector<LayerReweigh<T>> layer;
  bool use_spatial = true;
  bool use_layer = true;
  bool use_order = true;
  mutable InterCallCounts calls;

  InterElementController() = default;
  InterElementController(const ModelConfig& cfg, Rng& rng)
      : use_spatial(cfg.spatial_transformer), use_layer(cfg.layer_transformer), use_order(cfg.order_embedding) {
    Rng r = rng.fork(3);
    for (auto g : cfg.level_grid) {
      spatial.emplace_back(cfg, g, r);
      layer.emplace_back(cfg, r);
    }
  }

  void set_switches(bool spatial_on, bool layer_on, bool order_on) {
    use_spatial = spatial_on;
    use_layer = layer_on;
    use_order = order_on;
    for (auto& l : layer) l.order_embedding = order_on;
  }

  std::size_t order_rotations() const {
    std::size_t n = 0;
    for (const auto& l : layer) n += l.rotations;
    return n;
  }

  /// One level: spatial reweigh, layer reweigh, layer sum.
  Tensor<T> fuse_level(std::size_t level, const StackedFeatures<T>& s) const {
    StackedFeatures<T> cur = s;
    if (use_spatial) {
      ++calls.spatial;
      cur = spatial[level](cur).features;
    }
    if (use_layer) {
      ++calls.layer;
      cur = layer[level](cur).features;
    }
    return fuse(cur);
  }

  /// Fused features per level, [B, N_i, C].
  FeaturePyramid<T> operator()(const std::vector<OrderedPyramid<T>>& elements) const {
    const auto stacks = sort_and_stack(elements);
    if (stacks.size() != spatial.size())
      throw DimensionError("element pyramids have " + std::to_string(stacks.size()) + " levels, controller has " +
                           std::to_string(spatial.size()));
    FeaturePyramid<T> out;
    for (std::size_t l = 0; l < stacks.size(); ++l) out.levels.push_back(fuse_level(l, stacks[l]));
    return out;
  }

  void collect(const std::string& prefix, nn::NamedParams<T>& out) const {
    for (std::size_t i = 0; i < spatial.size(); ++i) {
      spatial[i].collect(prefix + ".level" + std::to_string(i) + ".spatial", out);
      layer[i].collect(prefix + ".level" + std::to_string(i) + ".layer", out);
    }
  }
};

}  // namespace dcctl
