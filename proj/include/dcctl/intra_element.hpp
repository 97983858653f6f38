#pragma once

#include <map>
#include <string>
#include <vector>

#include "dcctl/diffusion.hpp"
#include "dcctl/embeddings.hpp"
#include "dcctl/model_config.hpp"
#include "dcctl/nn.hpp"

namespace dcctl {

/// Per-level token features [B, N_i, C], finest level first.
template <class T>
struct FeaturePyramid {
  std::vector<Tensor<T>> levels;

  std::size_t size() const { return levels.size(); }
  const Tensor<T>& operator[](std::size_t i) const { return levels[i]; }
};

/// One content condition for a batch: an image [B, channels, S, S] of a given kind.
template <class T>
struct ContentInput {
  ConditionKind kind;
  Tensor<T> image;
};

inline std::size_t content_channels(ConditionKind k) {
  switch (k) {
    case ConditionKind::color: return 3;
    case ConditionKind::edge: return 1;
    default: throw LookupError("'" + std::string(kind_name(k)) + "' is not a content condition kind");
  }
}

/// Strided conv stack producing one feature map per level.
template <class T>
struct ContentEncoder {
  nn::Conv2d<T> stem;
  std::vector<nn::Conv2d<T>> conv_a, conv_b;
  Tensor<T> kind_vector;  // [C], added to every token

  ContentEncoder() = default;
  ContentEncoder(std::size_t in_channels, const ModelConfig& cfg, Rng& rng)
      : stem(in_channels, cfg.stem_width, 3, 1, 1, rng) {
    std::size_t prev = cfg.image_size, in = cfg.stem_width;
    for (auto g : cfg.level_grid) {
      conv_a.emplace_back(in, cfg.width, 3, g != prev ? 2 : 1, 1, rng);
      conv_b.emplace_back(cfg.width, cfg.width, 3, 1, 1, rng);
      in = cfg.width;
      prev = g;
    }
    kind_vector = nn::normal_param<T>({cfg.width}, rng, 0.1);
  }

  /// Spatial features per level, [B, C, g, g].
  std::vector<Tensor<T>> features(const Tensor<T>& image) const {
    std::vector<Tensor<T>> out;
    Tensor<T> x = silu(stem(image));
    for (std::size_t i = 0; i < conv_a.size(); ++i) {
      Tensor<T> f = conv_b[i](silu(conv_a[i](x)));
      out.push_back(f);
      x = silu(f);
    }
    return out;
  }

  /// Token features per level with the kind vector added, [B, g*g, C].
  std::vector<Tensor<T>> tokens(const Tensor<T>& image) const {
    std::vector<Tensor<T>> out;
    for (const auto& f : features(image)) out.push_back(add(nn::to_tokens(f), kind_vector));
    return out;
  }

  void collect(const std::string& prefix, nn::NamedParams<T>& out) const {
    stem.collect(prefix + ".stem", out);
    for (std::size_t i = 0; i < conv_a.size(); ++i) {
      conv_a[i].collect(prefix + ".level" + std::to_string(i) + ".a", out);
      conv_b[i].collect(prefix + ".level" + std::to_string(i) + ".b", out);
    }
    out.emplace_back(prefix + ".kind_vector", kind_vector);
  }
};

/// Registry of content encoders, one per content kind.
template <class T>
struct ContentEncoders {
  std::vector<ConditionKind> kinds;
  std::vector<ContentEncoder<T>> encoders;
  std::vector<std::size_t> grid;

  ContentEncoders() = default;
  ContentEncoders(const ModelConfig& cfg, Rng& rng) : kinds(cfg.content_kinds), grid(cfg.level_grid) {
    for (auto k : kinds) {
      Rng r = rng.fork(static_cast<std::uint64_t>(k) + 1);
      encoders.emplace_back(content_channels(k), cfg, r);
    }
  }

  const ContentEncoder<T>& encoder(ConditionKind k) const {
    for (std::size_t i = 0; i < kinds.size(); ++i)
      if (kinds[i] == k) return encoders[i];
    throw LookupError("no content encoder registered for kind '" + std::string(kind_name(k)) + "'");
  }

  /// Conditions concatenated along the token axis at every level.
  FeaturePyramid<T> encode(const std::vector<ContentInput<T>>& inputs) const {
    if (inputs.empty()) throw ContractError("encode needs at least one content condition");
    std::vector<std::vector<Tensor<T>>> per_level(grid.size());
    for (const auto& in : inputs) {
      auto toks = encoder(in.kind).tokens(in.image);
      for (std::size_t l = 0; l < grid.size(); ++l) per_level[l].push_back(toks[l]);
    }
    FeaturePyramid<T> p;
    for (auto& parts : per_level) p.levels.push_back(parts.size() == 1 ? parts[0] : concat(parts, 1));
    return p;
  }

  /// Position-aligned features, [B, g*g, C] per level: the mean over conditions,
  /// re-standardized to the statistics of the concatenated condition tokens.
  /// Used as the base-stage injection and as the transform target.
  FeaturePyramid<T> aligned(const std::vector<ContentInput<T>>& inputs) const {
    FeaturePyramid<T> cat = encode(inputs);
    if (inputs.size() == 1) return cat;
    FeaturePyramid<T> out;
    const T inv = T(1) / static_cast<T>(inputs.size());
    for (std::size_t l = 0; l < grid.size(); ++l) {
      const std::size_t n = grid[l] * grid[l];
      Tensor<T> acc;
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        Tensor<T> part = slice(cat.levels[l], 1, k * n, n);
        acc = acc.defined() ? add(acc, part) : part;
      }
      out.levels.push_back(cross_normalize(scale(acc, inv), cat.levels[l]));
    }
    return out;
  }

  void collect(const std::string& prefix, nn::NamedParams<T>& out) const {
    for (std::size_t i = 0; i < kinds.size(); ++i) encoders[i].collect(prefix + "." + std::string(kind_name(kinds[i])), out);
  }
};

/// Layout map [B,1,S,S] to the level-0 layout feature f0 [B,C,g0,g0].
template <class T>
struct LayoutEmbedder {
  nn::Conv2d<T> c1, c2, c3;

  LayoutEmbedder() = default;
  LayoutEmbedder(const ModelConfig& cfg, Rng& rng)
      : c1(1, cfg.stem_width, 3, 1, 1, rng),
        c2(cfg.stem_width, cfg.width, 3, 2, 1, rng),
        c3(cfg.width, cfg.width, 3, 1, 1, rng) {}

  Tensor<T> operator()(const Tensor<T>& layout) const {
    if (layout.rank() != 4 || layout.dim(1) != 1) throw DimensionError("layout map must be [B,1,S,S], got " + to_string(layout.shape()));
    return c3(silu(c2(silu(c1(layout)))));
  }
  void collect(const std::string& prefix, nn::NamedParams<T>& out) const {
    c1.collect(prefix + ".c1", out);
    c2.collect(prefix + ".c2", out);
    c3.collect(prefix + ".c3", out);
  }
};

/// Single-head attention sublayer with rotary positions on queries and keys.
template <class T>
struct RotaryAttention {
  nn::Linear<T> q, k, v, o;
  double base = 10000.0;

  RotaryAttention() = default;
  RotaryAttention(std::size_t width, double base_, Rng& rng)
      : q(width, width, rng, false, false), k(width, width, rng, false, false), v(width, width, rng, false, false),
        o(width, width, rng), base(base_) {}

  Tensor<T> operator()(const Tensor<T>& queries, const std::vector<GridPos>& qpos, const Tensor<T>& context,
                       const std::vector<GridPos>& kpos) const {
    return o(nn::attention(rope_apply_2d(q(queries), qpos, base), rope_apply_2d(k(context), kpos, base), v(context)));
  }
  void collect(const std::string& prefix, nn::NamedParams<T>& out) const {
    q.collect(prefix + ".q", out);
    k.collect(prefix + ".k", out);
    v.collect(prefix + ".v", out);
    o.collect(prefix + ".o", out);
  }
};

/// ResBlock, then self-attention, cross-attention to the content tokens and an
/// FFN (each pre-norm residual); a conv of the result gives the transformed
/// content feature, re-standardized to the content statistics.
template <class T>
struct LayoutBlock {
  std::size_t grid = 0;
  bool halves = false;
  OffsetDelta delta;
  nn::Conv2d<T> down;
  nn::ResBlock<T> res;
  nn::LayerNorm<T> ln_self, ln_cross, ln_context, ln_ffn;
  RotaryAttention<T> self_attn, cross_attn;
  nn::FeedForward<T> ffn;
  nn::Conv2d<T> out_conv;

  struct Output {
    Tensor<T> f_next;   // [B, C, g, g]
    Tensor<T> h_prime;  // [B, g*g, C], cross-normalized
  };

  LayoutBlock() = default;
  LayoutBlock(const ModelConfig& cfg, std::size_t level, Rng& rng)
      : grid(cfg.level_grid[level]),
        halves(level > 0 && cfg.level_grid[level] != cfg.level_grid[level - 1]),
        delta(cfg.delta_for(cfg.level_grid[level])),
        res(cfg.width, cfg.width, cfg.emb_dim, rng),
        ln_self(cfg.width),
        ln_cross(cfg.width),
        ln_context(cfg.width),
        ln_ffn(cfg.width),
        self_attn(cfg.width, cfg.rope_base, rng),
        cross_attn(cfg.width, cfg.rope_base, rng),
        ffn(cfg.width, cfg.ffn_ratio, rng),
        out_conv(cfg.width, cfg.width, 3, 1, 1, rng) {
    if (halves) down = nn::Conv2d<T>(cfg.width, cfg.width, 3, 2, 1, rng);
  }

  /// f: previous layout feature; h: content tokens [B, K*g*g, C]; emb: [B, E].
  Output operator()(const Tensor<T>& f_in, const Tensor<T>& h, const Tensor<T>& emb) const {
    Tensor<T> f = halves ? down(f_in) : f_in;
    if (f.dim(2) != grid || f.dim(3) != grid) throw DimensionError("layout feature grid does not match block level");
    const std::size_t n = grid * grid;
    if (h.rank() != 3 || h.dim(1) % n || h.dim(2) != f.dim(1))
      throw DimensionError("content tokens " + to_string(h.shape()) + " do not fit a " + std::to_string(grid) + "x" +
                           std::to_string(grid) + " level of width " + std::to_string(f.dim(1)));
    f = res(f, emb);
    const auto qpos = grid_positions(grid, grid);
    std::vector<GridPos> kpos;
    const auto shifted = content_positions(qpos, delta);
    for (std::size_t r = 0; r < h.dim(1) / n; ++r) kpos.insert(kpos.end(), shifted.begin(), shifted.end());

    Tensor<T> x = nn::to_tokens(f);
    Tensor<T> a = ln_self(x);
    x = add(x, self_attn(a, qpos, a, qpos));
    x = add(x, cross_attn(ln_cross(x), qpos, ln_context(h), kpos));
    x = add(x, ffn(ln_ffn(x)));
    Output out;
    out.f_next = nn::from_tokens(x, grid, grid);
    out.h_prime = cross_normalize(nn::to_tokens(out_conv(out.f_next)), h);
    return out;
  }

  void collect(const std::string& prefix, nn::NamedParams<T>& out) const {
    if (halves) down.collect(prefix + ".down", out);
    res.collect(prefix + ".res", out);
    ln_self.collect(prefix + ".ln_self", out);
    ln_cross.collect(prefix + ".ln_cross", out);
    ln_context.collect(prefix + ".ln_context", out);
    ln_ffn.collect(prefix + ".ln_ffn", out);
    self_attn.collect(prefix + ".self_attn", out);
    cross_attn.collect(prefix + ".cross_attn", out);
    ffn.collect(prefix + ".ffn", out);
    out_conv.collect(prefix + ".out_conv", out);
  }
};

template <class T>
struct IntraOutput {
  FeaturePyramid<T> transformed;  // h' per level
  Tensor<T> f0;                   // layout embedding
  Tensor<T> f0_injection;         // f0 through the zero-initialized input port
};

/// Moves an element's content features onto its layout.
template <class T>
struct IntraElementController {
  TimeEmbedder<T> time;
  TypeEmbedding<T> types;
  LayoutEmbedder<T> layout;
  nn::Conv2d<T> f0_port;  // 1x1, zero-initialized
  std::vector<LayoutBlock<T>> blocks;
  std::vector<ConditionKind> content_kinds;
  bool inject_layout = true;

  IntraElementController() = default;
  IntraElementController(const ModelConfig& cfg, Rng& rng) : content_kinds(cfg.content_kinds), inject_layout(cfg.inject_layout) {
    Rng r = rng.fork(2);
    time = TimeEmbedder<T>(cfg.emb_dim, cfg.steps, r);
    types = TypeEmbedding<T>(cfg.emb_dim, r);
    layout = LayoutEmbedder<T>(cfg, r);
    f0_port = nn::Conv2d<T>(cfg.width, cfg.width, 1, 1, 0, r, /*zero_init=*/true);
    for (std::size_t i = 0; i < cfg.level_grid.size(); ++i) blocks.emplace_back(cfg, i, r);
  }

  /// Conditioning vector: time + layout-kind embedding + mean content-kind embedding.
  Tensor<T> embedding(const std::vector<int>& ts, const std::vector<ConditionKind>& layout_kinds) const {
    if (layout_kinds.size() != ts.size()) throw DimensionError("one layout kind per batch item required");
    for (auto k : layout_kinds)
      if (!is_layout_kind(k)) throw LookupError("'" + std::string(kind_name(k)) + "' is not a layout kind");
    Tensor<T> content = sum_axis(types(content_kinds), 0, /*keepdim=*/true);
    content = scale(content, T(1) / static_cast<T>(content_kinds.size()));
    return add(add(time(ts), types(layout_kinds)), content);
  }

  /// content: encoded content pyramid [B, K*N_i, C]; layout_map: [B,1,S,S].
  IntraOutput<T> operator()(const FeaturePyramid<T>& content, const Tensor<T>& layout_map,
                            const std::vector<ConditionKind>& layout_kinds, const std::vector<int>& ts) const {
    if (content.size() != blocks.size())
      throw DimensionError("content pyramid has " + std::to_string(content.size()) + " levels, controller has " +
                           std::to_string(blocks.size()));
    const Tensor<T> emb = embedding(ts, layout_kinds);
    IntraOutput<T> out;
    out.f0 = layout(layout_map);
    if (inject_layout) out.f0_injection = f0_port(out.f0);
    Tensor<T> f = out.f0;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      auto step = blocks[i](f, content[i], emb);
      f = step.f_next;
      out.transformed.levels.push_back(step.h_prime);
    }
    return out;
  }

  void collect(const std::string& prefix, nn::NamedParams<T>& out) const {
    time.collect(prefix + ".time", out);
    types.collect(prefix + ".types", out);
    layout.collect(prefix + ".layout", out);
    f0_port.collect(prefix + ".f0_port", out);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".block" + std::to_string(i), out);
  }
};

}  // namespace dcctl
