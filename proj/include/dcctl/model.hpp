#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dcctl/diffusion.hpp"
#include "dcctl/inter_element.hpp"
#include "dcctl/intra_element.hpp"
#include "dcctl/model_config.hpp"
#include "dcctl/raster.hpp"
#include "dcctl/scene_synth.hpp"

namespace dcctl {

enum class ParamGroup { base, intra, inter };

inline const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::base: return "base";
    case ParamGroup::intra: return "intra";
    case ParamGroup::inter: return "inter";
  }
  return "?";
}

/// How element features reach the denoiser.
enum class Route {
  direct,  // single element, transformed features injected as they are
  fused,   // through the inter-element controller
};

/// Denoiser, content encoders and both controllers.
template <class T>
struct Model {
  ModelConfig cfg;
  NoiseSchedule schedule;
  Denoiser<T> denoiser;
  ContentEncoders<T> encoders;
  IntraElementController<T> intra;
  InterElementController<T> inter;

  Model() = default;
  explicit Model(const ModelConfig& c, std::uint64_t seed = 0) : cfg(c) {
    cfg.validate();
    schedule = cfg.schedule();
    const Rng root(seed, 0x6d6f64656cULL);
    Rng r1 = root.fork(1), r2 = root.fork(2), r3 = root.fork(3), r4 = root.fork(4);
    denoiser = Denoiser<T>(cfg.denoiser(), r1);
    encoders = ContentEncoders<T>(cfg, r2);
    intra = IntraElementController<T>(cfg, r3);
    inter = InterElementController<T>(cfg, r4);
  }

  nn::NamedParams<T> params(ParamGroup g) const {
    nn::NamedParams<T> out;
    switch (g) {
      case ParamGroup::base:
        denoiser.collect("denoiser", out);
        encoders.collect("encoders", out);
        break;
      case ParamGroup::intra: intra.collect("intra", out); break;
      case ParamGroup::inter: inter.collect("inter", out); break;
    }
    return out;
  }

  nn::NamedParams<T> all_params() const {
    nn::NamedParams<T> out;
    for (auto g : {ParamGroup::base, ParamGroup::intra, ParamGroup::inter}) {
      auto p = params(g);
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }

  void set_trainable(ParamGroup g, bool on) const {
    for (auto& [name, t] : params(g)) {
      Tensor<T> h = t;
      h.set_requires_grad(on);
    }
  }

  void apply_switches() { inter.set_switches(cfg.spatial_transformer, cfg.layer_transformer, cfg.order_embedding); }
};

// ---------------------------------------------------------------------------
// Raster <-> tensor

/// RGB rasters map to [-1, 1]; single-channel maps to {0, 1}.
template <class T>
Tensor<T> images_to_tensor(const std::vector<const Image*>& images) {
  if (images.empty()) throw ContractError("no images to convert");
  const Image& first = *images[0];
  std::vector<T> v;
  v.reserve(images.size() * first.data.size());
  for (const Image* img : images) {
    if (img->channels != first.channels || img->height != first.height || img->width != first.width)
      throw DimensionError("images in one batch differ in shape");
    for (auto px : img->data)
      v.push_back(img->channels == 3 ? static_cast<T>(px) / T(127.5) - T(1) : (px ? T(1) : T(0)));
  }
  return Tensor<T>::from({images.size(), first.channels, first.height, first.width}, std::move(v));
}

/// Batch item `b` of x [B,3,S,S] in [-1,1] to an 8-bit raster.
template <class T>
Image tensor_to_image(const Tensor<T>& x, std::size_t b) {
  const std::size_t c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Image img(c, h, w);
  const std::size_t base = b * c * h * w;
  for (std::size_t i = 0; i < c * h * w; ++i) {
    const double v = (static_cast<double>(x[base + i]) + 1.0) * 127.5;
    img.data[i] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
  }
  return img;
}

inline const Image& layout_map(const scene::ElementConditions& e, ConditionKind k) {
  switch (k) {
    case ConditionKind::mask: return e.mask;
    case ConditionKind::box: return e.box;
    case ConditionKind::dot: return e.dot;
    default: throw LookupError("'" + std::string(kind_name(k)) + "' is not a layout kind");
  }
}

inline const Image& content_map(const scene::ElementConditions& e, ConditionKind k, bool at_pose) {
  switch (k) {
    case ConditionKind::edge: return at_pose ? e.pose_edge : e.content_edge;
    case ConditionKind::color: return at_pose ? e.pose_color : e.content_color;
    default: throw LookupError("'" + std::string(kind_name(k)) + "' is not a content kind");
  }
}

inline const Image& scene_content_map(const scene::ConditionSet& cs, ConditionKind k) {
  switch (k) {
    case ConditionKind::edge: return cs.scene_edge;
    case ConditionKind::color: return cs.scene_color;
    default: throw LookupError("'" + std::string(kind_name(k)) + "' is not a content kind");
  }
}

/// One element slot across a batch of scenes.
template <class T>
struct ElementSlot {
  std::vector<ContentInput<T>> content;  // canonical content, [B, ., S, S] per kind
  Tensor<T> layout;                      // [B, 1, S, S]
  std::vector<ConditionKind> layout_kinds;
  int order = 0;
};

/// Element conditions for B scenes that each contribute one element per slot.
template <class T>
struct SceneBatch {
  std::size_t batch = 0;
  std::vector<ElementSlot<T>> slots;
  std::vector<int> classes;
};

/// Reference to one scene's elements in slot order.
struct SceneRef {
  const scene::ConditionSet* conditions = nullptr;
  std::vector<std::size_t> elements;  // element index per slot
  ConditionKind layout_kind = ConditionKind::mask;
  int class_id = 0;
  std::vector<ConditionKind> slot_kinds;  // per-slot override of layout_kind
};

template <class T>
SceneBatch<T> make_scene_batch(const std::vector<SceneRef>& refs, const std::vector<int>& slot_orders,
                               const std::vector<ConditionKind>& content_kinds) {
  if (refs.empty()) throw ContractError("empty scene batch");
  SceneBatch<T> b;
  b.batch = refs.size();
  const std::size_t slots = slot_orders.size();
  for (const auto& r : refs) {
    if (r.elements.size() != slots) throw DimensionError("every scene in a batch needs the same element count");
    b.classes.push_back(r.class_id);
  }
  for (std::size_t s = 0; s < slots; ++s) {
    ElementSlot<T> slot;
    slot.order = slot_orders[s];
    for (auto k : content_kinds) {
      std::vector<const Image*> imgs;
      for (const auto& r : refs) imgs.push_back(&content_map(r.conditions->elements.at(r.elements[s]), k, false));
      slot.content.push_back({k, images_to_tensor<T>(imgs)});
    }
    std::vector<const Image*> lay;
    for (const auto& r : refs) {
      const ConditionKind kind = r.slot_kinds.empty() ? r.layout_kind : r.slot_kinds.at(s);
      lay.push_back(&layout_map(r.conditions->elements.at(r.elements[s]), kind));
      slot.layout_kinds.push_back(kind);
    }
    slot.layout = images_to_tensor<T>(lay);
    b.slots.push_back(std::move(slot));
  }
  return b;
}

/// Tokens [B, g*g, C] per level to denoiser ports [B, C, g, g].
template <class T>
std::vector<Tensor<T>> to_ports(const FeaturePyramid<T>& p, const std::vector<std::size_t>& grid) {
  std::vector<Tensor<T>> out;
  for (std::size_t l = 0; l < p.size(); ++l) out.push_back(nn::from_tokens(p[l], grid[l], grid[l]));
  return out;
}

template <class T>
struct ControlResult {
  Injection<T> injection;
  FeaturePyramid<T> features;  // what was injected, as tokens
  std::vector<IntraOutput<T>> per_slot;
};

/// Content pyramids of every slot (independent of the diffusion step).
template <class T>
std::vector<FeaturePyramid<T>> encode_slots(const Model<T>& m, const SceneBatch<T>& b) {
  std::vector<FeaturePyramid<T>> out;
  for (const auto& s : b.slots) out.push_back(m.encoders.encode(s.content));
  return out;
}

/// Runs the controllers for a batch at steps `ts` and assembles the denoiser injection.
template <class T>
ControlResult<T> control(const Model<T>& m, const SceneBatch<T>& b, const std::vector<FeaturePyramid<T>>& content,
                         const std::vector<int>& ts, Route route) {
  if (content.size() != b.slots.size()) throw DimensionError("one content pyramid per slot required");
  ControlResult<T> out;
  std::vector<OrderedPyramid<T>> ordered;
  for (std::size_t s = 0; s < b.slots.size(); ++s) {
    out.per_slot.push_back(m.intra(content[s], b.slots[s].layout, b.slots[s].layout_kinds, ts));
    ordered.push_back({out.per_slot.back().transformed, b.slots[s].order});
    const Tensor<T>& f0 = out.per_slot.back().f0_injection;
    if (f0.defined()) out.injection.input = out.injection.input.defined() ? add(out.injection.input, f0) : f0;
  }
  if (route == Route::direct) {
    if (b.slots.size() != 1) throw ContractError("direct injection takes exactly one element");
    out.features = out.per_slot[0].transformed;
  } else {
    out.features = m.inter(ordered);
  }
  out.injection.levels = to_ports(out.features, m.cfg.level_grid);
  return out;
}

/// Ancestral sampling from pure noise; item i draws all its noise from its own seed.
template <class T>
Tensor<T> sample(const Model<T>& m, const SceneBatch<T>& b, const std::vector<std::uint64_t>& seeds, Route route) {
  if (seeds.size() != b.batch) throw DimensionError("one seed per batch item required");
  NoGradGuard no_grad;
  const std::size_t c = m.cfg.denoiser().image_channels, s = m.cfg.image_size, per = c * s * s;
  std::vector<Rng> rngs;
  std::vector<T> z0;
  for (auto seed : seeds) {
    rngs.emplace_back(seed, 0x73616d70ULL);
    auto v = rngs.back().normal_vector<T>(per);
    z0.insert(z0.end(), v.begin(), v.end());
  }
  Tensor<T> z = Tensor<T>::from({b.batch, c, s, s}, std::move(z0));
  const auto content = encode_slots(m, b);
  for (int t = m.schedule.steps(); t >= 1; --t) {
    const std::vector<int> ts(b.batch, t);
    const auto ctl = control(m, b, content, ts, route);
    const Tensor<T> eps = m.denoiser(z, ts, b.classes, ctl.injection);
    Tensor<T> mean = posterior_mean(m.schedule, z, t, eps);
    if (t > 1) {
      const double sigma = std::sqrt(m.schedule.posterior_variance(t));
      auto v = mean.values();
      for (std::size_t i = 0; i < b.batch; ++i)
        for (std::size_t j = 0; j < per; ++j) v[i * per + j] += static_cast<T>(sigma * rngs[i].normal());
      mean = Tensor<T>::from(mean.shape(), std::move(v));
    }
    z = mean;
  }
  return z;
}

}  // namespace dcctl
