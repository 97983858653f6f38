#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dcctl/model.hpp"
#include "dcctl/scene_synth.hpp"
#include "dcctl/serialize.hpp"

namespace dcctl {

// ---------------------------------------------------------------------------
// Losses

/// Foreground pixels get total_area / foreground_area, background pixels 1.
/// An empty foreground gives all ones. mask: [B,1,H,W] (or [H,W]) with values 0/1.
template <class T>
Tensor<T> foreground_weight_mask(const Tensor<T>& mask) {
  if (mask.rank() != 2 && mask.rank() != 4) throw DimensionError("weight mask expects [H,W] or [B,1,H,W]");
  const std::size_t b = mask.rank() == 4 ? mask.dim(0) : 1;
  const std::size_t area = mask.numel() / b;
  std::vector<T> out(mask.numel(), T(1));
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t fg = 0;
    for (std::size_t p = 0; p < area; ++p) fg += mask[i * area + p] != T(0) ? 1 : 0;
    if (fg == 0) continue;
    const T w = static_cast<T>(static_cast<double>(area) / static_cast<double>(fg));
    for (std::size_t p = 0; p < area; ++p)
      if (mask[i * area + p] != T(0)) out[i * area + p] = w;
  }
  return Tensor<T>::from(mask.shape(), std::move(out));
}

/// mean over all entries of m * (eps - eps_hat)^2, m [B,1,H,W] broadcast over channels.
template <class T>
Tensor<T> mse_loss(const Tensor<T>& eps, const Tensor<T>& eps_hat, const Tensor<T>& m) {
  if (eps.shape() != eps_hat.shape()) throw DimensionError("mse_loss: prediction shape " + to_string(eps_hat.shape()) + " vs " + to_string(eps.shape()));
  return mean(mul(square(sub(eps, eps_hat)), m));
}

/// Weight mask resampled to a token grid by area averaging: [B, g*g, 1].
template <class T>
Tensor<T> mask_tokens(const Tensor<T>& m, std::size_t grid) {
  if (m.rank() != 4 || m.dim(1) != 1 || m.dim(2) % grid) throw DimensionError("mask_tokens expects [B,1,S,S] with S divisible by the grid");
  Tensor<T> pooled = m.dim(2) == grid ? m : avg_pool(m, m.dim(2) / grid);
  return reshape(pooled, {m.dim(0), grid * grid, 1});
}

/// Mean over levels of the weighted L1 distance; the target is treated as a constant.
template <class T>
Tensor<T> transform_loss(const FeaturePyramid<T>& transformed, const FeaturePyramid<T>& target, const Tensor<T>& m) {
  if (transformed.size() != target.size() || transformed.size() == 0) throw DimensionError("transform_loss: pyramid levels disagree");
  Tensor<T> total;
  for (std::size_t l = 0; l < transformed.size(); ++l) {
    const Tensor<T>& h = transformed[l];
    if (h.shape() != target[l].shape()) throw DimensionError("transform_loss: level " + std::to_string(l) + " shapes disagree");
    const auto grid = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(h.dim(1)))));
    const Tensor<T> term = mean(mul(abs(sub(h, target[l].detach())), mask_tokens(m, grid)));
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, T(1) / static_cast<T>(transformed.size()));
}

template <class T>
Tensor<T> total_loss(const Tensor<T>& mse, const Tensor<T>& transform, double lambda) {
  if (!transform.defined() || lambda == 0.0) return mse;
  return add(mse, scale(transform, static_cast<T>(lambda)));
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with decoupled weight decay and optional global-norm clipping.
template <class T>
class AdamW {
 public:
  struct Options {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double clip_norm = 1.0;  // <= 0 disables
  };

  AdamW() = default;
  AdamW(nn::NamedParams<T> params, Options opt) : params_(std::move(params)), opt_(opt) {
    for (auto& [name, p] : params_) {
      m_.emplace_back(p.numel(), T(0));
      v_.emplace_back(p.numel(), T(0));
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  /// Applies one update from the accumulated gradients; returns the pre-clip gradient norm.
  double step() {
    ++t_;
    double sq = 0;
    for (auto& [name, p] : params_)
      if (p.has_grad())
        for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    const double clip = opt_.clip_norm > 0 && norm > opt_.clip_norm ? opt_.clip_norm / norm : 1.0;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].second;
      if (!p.has_grad()) continue;
      auto data = p.mutable_data();
      auto grad = p.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < data.size(); ++j) {
        const double g = static_cast<double>(grad[j]) * clip;
        m[j] = static_cast<T>(opt_.beta1 * static_cast<double>(m[j]) + (1 - opt_.beta1) * g);
        v[j] = static_cast<T>(opt_.beta2 * static_cast<double>(v[j]) + (1 - opt_.beta2) * g * g);
        const double mhat = static_cast<double>(m[j]) / bc1, vhat = static_cast<double>(v[j]) / bc2;
        const double upd = mhat / (std::sqrt(vhat) + opt_.eps) + opt_.weight_decay * static_cast<double>(data[j]);
        data[j] = static_cast<T>(static_cast<double>(data[j]) - opt_.lr * upd);
      }
    }
    return norm;
  }

  std::uint64_t steps_taken() const { return t_; }
  const nn::NamedParams<T>& params() const { return params_; }

  /// Moment buffers as records, for checkpointing.
  std::vector<io::Record> state_records() const {
    std::vector<io::Record> out;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out.push_back(io::make_record<T>("adam.m." + params_[i].first, params_[i].second.shape(), m_[i]));
      out.push_back(io::make_record<T>("adam.v." + params_[i].first, params_[i].second.shape(), v_[i]));
    }
    out.push_back(io::make_record<double>("adam.t", {1}, {static_cast<double>(t_)}));
    return out;
  }

  void load_state(const std::map<std::string, io::Record>& recs) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto fm = recs.find("adam.m." + params_[i].first), fv = recs.find("adam.v." + params_[i].first);
      if (fm == recs.end() || fv == recs.end()) throw StateError("checkpoint lacks optimizer state for '" + params_[i].first + "'");
      m_[i] = fm->second.template as<T>();
      v_[i] = fv->second.template as<T>();
      if (m_[i].size() != params_[i].second.numel() || v_[i].size() != params_[i].second.numel())
        throw StateError("optimizer state size mismatch for '" + params_[i].first + "'");
    }
    auto ft = recs.find("adam.t");
    if (ft == recs.end()) throw StateError("checkpoint lacks optimizer step count");
    t_ = static_cast<std::uint64_t>(ft->second.template as<double>().at(0));
  }

 private:
  nn::NamedParams<T> params_;
  Options opt_;
  std::vector<std::vector<T>> m_, v_;
  std::uint64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints: "DCCK", u32 version, u32 stage, u64 config hash, u32 record count, records.

enum class Stage : std::uint32_t { base = 1, intra = 2, inter = 3 };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::base: return "base";
    case Stage::intra: return "intra";
    case Stage::inter: return "inter";
  }
  return "?";
}

inline Stage parse_stage(const std::string& s) {
  if (s == "base") return Stage::base;
  if (s == "intra") return Stage::intra;
  if (s == "inter") return Stage::inter;
  throw ConfigError("unknown stage '" + s + "' (expected base, intra or inter)");
}

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Stage stage = Stage::base;
  std::uint64_t config_hash = 0;
  std::vector<io::Record> records;

  std::map<std::string, io::Record> by_name() const {
    std::map<std::string, io::Record> m;
    for (const auto& r : records) m.emplace(r.name, r);
    return m;
  }
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw StateError("cannot write checkpoint '" + path.string() + "'");
    out.write("DCCK", 4);
    io::put_u32(out, kCheckpointVersion);
    io::put_u32(out, static_cast<std::uint32_t>(ck.stage));
    io::put_u64(out, ck.config_hash);
    io::put_u32(out, static_cast<std::uint32_t>(ck.records.size()));
    for (const auto& r : ck.records) io::write_record(out, r);
    if (!out) throw StateError("write failed for checkpoint '" + path.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StateError("checkpoint not found: '" + path.string() + "'");
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "DCCK") throw StateError("'" + path.string() + "' is not a checkpoint");
  try {
    const std::uint32_t version = io::get_u32(in);
    if (version != kCheckpointVersion) throw StateError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ck;
    const std::uint32_t stage = io::get_u32(in);
    if (stage < 1 || stage > 3) throw StateError("checkpoint has unknown stage id " + std::to_string(stage));
    ck.stage = static_cast<Stage>(stage);
    ck.config_hash = io::get_u64(in);
    const std::uint32_t count = io::get_u32(in);
    for (std::uint32_t i = 0; i < count; ++i) ck.records.push_back(io::read_record(in));
    return ck;
  } catch (const ParseError& e) {
    throw StateError("corrupt checkpoint '" + path.string() + "': " + e.what());
  }
}

template <class T>
std::uint64_t config_hash(const Model<T>& m) {
  return io::fnv1a(m.cfg.fingerprint());
}

template <class T>
std::vector<io::Record> parameter_records(const Model<T>& m) {
  std::vector<io::Record> out;
  for (const auto& [name, p] : m.all_params()) out.push_back(io::make_record<T>("param." + name, p.shape(), p.values()));
  return out;
}

/// Copies stored parameters into the model. Fails on a config mismatch or a missing tensor.
template <class T>
void load_parameters(Model<T>& m, const Checkpoint& ck) {
  if (ck.config_hash != config_hash(m)) throw StateError("checkpoint was written for a different model configuration");
  const auto recs = ck.by_name();
  for (auto& [name, p] : m.all_params()) {
    auto it = recs.find("param." + name);
    if (it == recs.end()) throw StateError("checkpoint lacks parameter '" + name + "'");
    if (it->second.shape != p.shape()) throw StateError("parameter '" + name + "' has shape " + to_string(it->second.shape) + " in the checkpoint");
    const auto v = it->second.template as<T>();
    Tensor<T> h = p;
    std::copy(v.begin(), v.end(), h.mutable_data().begin());
  }
}

// ---------------------------------------------------------------------------
// Staged training

struct TrainConfig {
  Stage stage = Stage::base;
  int steps = 3000;
  std::size_t batch = 16;
  double lr = 1e-4;
  double weight_decay = 0.0;
  double clip_norm = 1.0;
  double lambda = 1.0;
  double class_dropout = 0.2;
  std::uint64_t seed = 0;
  int log_every = 50;
  int checkpoint_every = 500;
  std::vector<ConditionKind> layout_kinds{ConditionKind::mask};
  bool train_denoiser_with_inter = false;

  void validate() const {
    if (steps < 0) throw ConfigError("steps must be nonnegative");
    if (batch == 0) throw ConfigError("batch must be positive");
    if (!(lr > 0)) throw ConfigError("learning rate must be positive");
    if (lambda < 0) throw ConfigError("lambda must be nonnegative");
    if (class_dropout < 0 || class_dropout > 1) throw ConfigError("class dropout must lie in [0, 1]");
    if (layout_kinds.empty()) throw ConfigError("at least one layout kind is required");
    for (auto k : layout_kinds)
      if (!is_layout_kind(k)) throw ConfigError("'" + std::string(kind_name(k)) + "' is not a layout kind");
  }
};

/// Per-draw class-dropout decision: true means the class embedding is zeroed.
inline bool drop_class(Rng& rng, double rate) { return rng.bernoulli(rate); }

/// Random generator for one training step: a pure function of (seed, stage, step).
inline Rng step_rng(std::uint64_t seed, Stage stage, std::uint64_t step) {
  return Rng(seed, (static_cast<std::uint64_t>(stage) << 40) + step);
}

struct StepLoss {
  double loss = 0, mse = 0, transform = 0;
};

/// Dataset indices grouped by element count, for batches of equal layer count.
struct CountBuckets {
  std::vector<std::vector<std::size_t>> buckets;  // by element count
  std::size_t total = 0;

  explicit CountBuckets(const std::vector<const scene::SampleEntry*>& samples) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const std::size_t n = samples[i]->spec.elements.size();
      if (buckets.size() <= n) buckets.resize(n + 1);
      buckets[n].push_back(i);
      ++total;
    }
  }

  /// A bucket drawn in proportion to its size, then `batch` members with replacement.
  std::vector<std::size_t> draw(Rng& rng, std::size_t batch) const {
    std::uint64_t pick = rng.below(total);
    std::size_t which = 0;
    while (pick >= buckets[which].size()) pick -= buckets[which++].size();
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < batch; ++i) out.push_back(buckets[which][rng.below(buckets[which].size())]);
    return out;
  }
};

/// Target images, noise, steps and classes for one batch.
template <class T>
struct DiffusionDraw {
  Tensor<T> z0, eps, weights;
  std::vector<int> ts, classes;
};

template <class T>
DiffusionDraw<T> diffusion_draw(const Model<T>& model, const std::vector<const Image*>& targets,
                                const std::vector<const Image*>& foreground, const std::vector<int>& classes,
                                double dropout, Rng& rng) {
  DiffusionDraw<T> d;
  d.z0 = images_to_tensor<T>(targets);
  d.weights = foreground_weight_mask(images_to_tensor<T>(foreground));
  d.eps = Tensor<T>::from(d.z0.shape(), rng.normal_vector<T>(d.z0.numel()));
  for (std::size_t i = 0; i < targets.size(); ++i) {
    d.ts.push_back(rng.range(1, model.schedule.steps()));
    d.classes.push_back(drop_class(rng, dropout) ? -1 : classes[i]);
  }
  return d;
}

/// Union of element silhouettes.
inline Image foreground_union(const scene::ConditionSet& cs) {
  Image u(1, cs.target.height, cs.target.width);
  for (const auto& e : cs.elements)
    for (std::size_t p = 0; p < u.data.size(); ++p) u.data[p] = u.data[p] || e.mask.data[p];
  return u;
}

/// One element alone over the scene background.
inline Image single_element_target(const scene::SampleEntry& s, std::size_t element) {
  scene::SceneSpec one;
  one.background = s.spec.background;
  one.elements = {s.spec.elements.at(element)};
  one.elements[0].z = 0;
  return scene::render_scene(one);
}

/// Builds the loss for one step of the given stage. Exposed for tests.
template <class T>
struct StageBatch {
  Tensor<T> loss, mse, transform;
};

template <class T>
StageBatch<T> stage_loss(const Model<T>& model, const std::vector<const scene::SampleEntry*>& train, const CountBuckets& buckets,
                         const TrainConfig& cfg, std::uint64_t step) {
  Rng rng = step_rng(cfg.seed, cfg.stage, step);
  StageBatch<T> out;
  const auto& kinds = model.cfg.content_kinds;
  if (cfg.stage == Stage::base) {
    std::vector<const Image*> targets, fg_ptr;
    std::vector<Image> fg;
    std::vector<int> classes;
    std::vector<std::vector<const Image*>> content(kinds.size());
    fg.reserve(cfg.batch);
    for (std::size_t i = 0; i < cfg.batch; ++i) {
      const auto& s = *train[rng.below(train.size())];
      targets.push_back(&s.conditions.target);
      fg.push_back(foreground_union(s.conditions));
      classes.push_back(s.spec.background);
      for (std::size_t k = 0; k < kinds.size(); ++k) content[k].push_back(&scene_content_map(s.conditions, kinds[k]));
    }
    for (const auto& f : fg) fg_ptr.push_back(&f);
    const auto d = diffusion_draw(model, targets, fg_ptr, classes, cfg.class_dropout, rng);
    std::vector<ContentInput<T>> inputs;
    for (std::size_t k = 0; k < kinds.size(); ++k) inputs.push_back({kinds[k], images_to_tensor<T>(content[k])});
    Injection<T> inj;
    inj.levels = to_ports(model.encoders.aligned(inputs), model.cfg.level_grid);
    const Tensor<T> zt = q_sample(model.schedule, d.z0, d.ts, d.eps);
    out.mse = mse_loss(d.eps, model.denoiser(zt, d.ts, d.classes, inj), d.weights);
    out.loss = out.mse;
    return out;
  }

  if (cfg.stage == Stage::intra) {
    std::vector<Image> targets;
    std::vector<const Image*> target_ptr, fg_ptr;
    std::vector<int> classes;
    std::vector<SceneRef> refs;
    std::vector<std::vector<const Image*>> pose(kinds.size());
    targets.reserve(cfg.batch);
    for (std::size_t i = 0; i < cfg.batch; ++i) {
      const auto& s = *train[rng.below(train.size())];
      const std::size_t e = rng.below(s.spec.elements.size());
      const ConditionKind lk = cfg.layout_kinds[rng.below(cfg.layout_kinds.size())];
      targets.push_back(single_element_target(s, e));
      fg_ptr.push_back(&s.conditions.elements[e].mask);
      classes.push_back(s.spec.background);
      refs.push_back({&s.conditions, {e}, lk, s.spec.background, {}});
      for (std::size_t k = 0; k < kinds.size(); ++k) pose[k].push_back(&content_map(s.conditions.elements[e], kinds[k], true));
    }
    for (const auto& t : targets) target_ptr.push_back(&t);
    const auto d = diffusion_draw(model, target_ptr, fg_ptr, classes, cfg.class_dropout, rng);
    const auto batch = make_scene_batch<T>(refs, {0}, kinds);
    std::vector<FeaturePyramid<T>> content;
    FeaturePyramid<T> target;
    {
      NoGradGuard frozen;
      content = encode_slots(model, batch);
      std::vector<ContentInput<T>> inputs;
      for (std::size_t k = 0; k < kinds.size(); ++k) inputs.push_back({kinds[k], images_to_tensor<T>(pose[k])});
      target = model.encoders.aligned(inputs);
    }
    const auto ctl = control(model, batch, content, d.ts, Route::direct);
    const Tensor<T> zt = q_sample(model.schedule, d.z0, d.ts, d.eps);
    out.mse = mse_loss(d.eps, model.denoiser(zt, d.ts, d.classes, ctl.injection), d.weights);
    out.transform = transform_loss(ctl.features, target, d.weights);
    out.loss = total_loss(out.mse, out.transform, cfg.lambda);
    return out;
  }

  // inter: whole scenes of one element count, elements in bottom-to-top slots
  const auto picks = buckets.draw(rng, cfg.batch);
  std::vector<const Image*> targets, fg_ptr;
  std::vector<Image> fg;
  std::vector<int> classes;
  std::vector<SceneRef> refs;
  std::vector<std::vector<const Image*>> scene_content(kinds.size());
  fg.reserve(picks.size());
  const ConditionKind lk = cfg.layout_kinds[rng.below(cfg.layout_kinds.size())];
  for (auto i : picks) {
    const auto& s = *train[i];
    targets.push_back(&s.conditions.target);
    fg.push_back(foreground_union(s.conditions));
    classes.push_back(s.spec.background);
    refs.push_back({&s.conditions, scene::paint_order(s.spec), lk, s.spec.background, {}});
    for (std::size_t k = 0; k < kinds.size(); ++k) scene_content[k].push_back(&scene_content_map(s.conditions, kinds[k]));
  }
  for (const auto& f : fg) fg_ptr.push_back(&f);
  const auto d = diffusion_draw(model, targets, fg_ptr, classes, cfg.class_dropout, rng);
  std::vector<int> orders(refs[0].elements.size());
  for (std::size_t l = 0; l < orders.size(); ++l) orders[l] = static_cast<int>(l);
  const auto batch = make_scene_batch<T>(refs, orders, kinds);

  std::vector<OrderedPyramid<T>> ordered;
  Tensor<T> f0_sum;
  FeaturePyramid<T> target;
  {
    NoGradGuard frozen;
    const auto content = encode_slots(model, batch);
    for (std::size_t s = 0; s < batch.slots.size(); ++s) {
      auto o = model.intra(content[s], batch.slots[s].layout, batch.slots[s].layout_kinds, d.ts);
      ordered.push_back({o.transformed, batch.slots[s].order});
      if (o.f0_injection.defined()) f0_sum = f0_sum.defined() ? add(f0_sum, o.f0_injection) : o.f0_injection;
    }
    std::vector<ContentInput<T>> inputs;
    for (std::size_t k = 0; k < kinds.size(); ++k) inputs.push_back({kinds[k], images_to_tensor<T>(scene_content[k])});
    target = model.encoders.aligned(inputs);
  }
  const FeaturePyramid<T> fused = model.inter(ordered);
  Injection<T> inj;
  inj.levels = to_ports(fused, model.cfg.level_grid);
  inj.input = f0_sum;
  const Tensor<T> zt = q_sample(model.schedule, d.z0, d.ts, d.eps);
  out.mse = mse_loss(d.eps, model.denoiser(zt, d.ts, d.classes, inj), d.weights);
  out.transform = transform_loss(fused, target, d.weights);
  out.loss = total_loss(out.mse, out.transform, cfg.lambda);
  return out;
}

/// Parameter groups updated in each stage.
inline std::vector<ParamGroup> trainable_groups(const TrainConfig& cfg) {
  switch (cfg.stage) {
    case Stage::base: return {ParamGroup::base};
    case Stage::intra: return {ParamGroup::intra};
    case Stage::inter:
      if (cfg.train_denoiser_with_inter) return {ParamGroup::inter, ParamGroup::base};
      return {ParamGroup::inter};
  }
  return {};
}

/// Text log: a header line, then one key=value record per logged step.
struct TrainLog {
  std::ostream* out = nullptr;

  void header(const TrainConfig& cfg) const {
    if (out) *out << "format=dcctl-log version=1 stage=" << stage_name(cfg.stage) << " seed=" << cfg.seed << " batch=" << cfg.batch << '\n';
  }
  std::ostream* progress = nullptr;  // optional human-readable progress, with timing

  void record(std::uint64_t step, const StepLoss& l, double grad_norm, double seconds) const {
    std::ostringstream os;
    os.precision(9);
    os << "step=" << step << " loss=" << l.loss << " mse=" << l.mse << " transform=" << l.transform << " grad_norm=" << grad_norm;
    if (out) {
      *out << os.str() << '\n';
      out->flush();
    }
    if (progress) *progress << os.str() << " elapsed=" << static_cast<long>(seconds) << "s" << std::endl;
  }
};

/// (step, loss) pairs from a training log.
inline std::vector<std::pair<std::uint64_t, double>> parse_log(std::istream& in) {
  std::vector<std::pair<std::uint64_t, double>> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line.rfind("format=", 0) == 0) continue;
    std::istringstream ls(line);
    std::string tok;
    bool have_step = false, have_loss = false;
    std::uint64_t step = 0;
    double loss = 0;
    while (ls >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw ParseError("expected key=value, got '" + tok + "'", lineno);
      const std::string k = tok.substr(0, eq), v = tok.substr(eq + 1);
      try {
        if (k == "step") {
          step = std::stoull(v);
          have_step = true;
        } else if (k == "loss") {
          loss = std::stod(v);
          have_loss = true;
        }
      } catch (const std::exception&) {
        throw ParseError("bad number for '" + k + "'", lineno);
      }
    }
    if (!have_step || !have_loss) throw ParseError("log record lacks step or loss", lineno);
    out.emplace_back(step, loss);
  }
  return out;
}

struct TrainResult {
  std::uint64_t steps_done = 0;
  double first_loss = 0, last_loss = 0;
  std::vector<double> losses;  // every step
};

/// Runs `cfg.steps` optimizer steps (continuing after `start_step` when resuming).
/// Parameters outside the stage's groups are frozen and left untouched.
template <class T>
TrainResult train_stage(Model<T>& model, const scene::Dataset& data, const TrainConfig& cfg, AdamW<T>& opt,
                        std::uint64_t start_step, const TrainLog& log,
                        const std::function<void(std::uint64_t)>& on_checkpoint = {}) {
  cfg.validate();
  const auto train = data.split("train");
  if (train.empty()) throw StateError("dataset has no training samples");
  const CountBuckets buckets(train);
  for (auto g : {ParamGroup::base, ParamGroup::intra, ParamGroup::inter}) model.set_trainable(g, false);
  for (auto g : trainable_groups(cfg)) model.set_trainable(g, true);
  TrainResult res;
  if (start_step == 0) log.header(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  for (std::uint64_t step = start_step; step < static_cast<std::uint64_t>(cfg.steps); ++step) {
    opt.zero_grad();
    const auto b = stage_loss(model, train, buckets, cfg, step);
    if (!std::isfinite(static_cast<double>(b.loss.item())))
      throw NumericError("non-finite loss at " + std::string(stage_name(cfg.stage)) + " step " + std::to_string(step));
    backward(b.loss);
    const double gn = opt.step();
    StepLoss l{static_cast<double>(b.loss.item()), static_cast<double>(b.mse.item()),
               b.transform.defined() ? static_cast<double>(b.transform.item()) : 0.0};
    if (res.losses.empty()) res.first_loss = l.loss;
    res.last_loss = l.loss;
    res.losses.push_back(l.loss);
    res.steps_done = step + 1;
    if (cfg.log_every > 0 && (step % static_cast<std::uint64_t>(cfg.log_every) == 0 || step + 1 == static_cast<std::uint64_t>(cfg.steps))) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log.record(step, l, gn, secs);
    }
    if (on_checkpoint && cfg.checkpoint_every > 0 && (step + 1) % static_cast<std::uint64_t>(cfg.checkpoint_every) == 0 &&
        step + 1 < static_cast<std::uint64_t>(cfg.steps))
      on_checkpoint(step + 1);
  }
  opt.zero_grad();
  for (auto g : {ParamGroup::base, ParamGroup::intra, ParamGroup::inter}) model.set_trainable(g, true);
  return res;
}

template <class T>
nn::NamedParams<T> stage_params(const Model<T>& model, const TrainConfig& cfg) {
  nn::NamedParams<T> out;
  for (auto g : trainable_groups(cfg)) {
    auto p = model.params(g);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

template <class T>
typename AdamW<T>::Options adam_options(const TrainConfig& cfg) {
  typename AdamW<T>::Options o;
  o.lr = cfg.lr;
  o.weight_decay = cfg.weight_decay;
  o.clip_norm = cfg.clip_norm;
  return o;
}

/// Full checkpoint: parameters, optimizer moments, and the number of completed steps.
template <class T>
Checkpoint make_checkpoint(const Model<T>& model, Stage stage, const AdamW<T>* opt, std::uint64_t steps_done) {
  Checkpoint ck;
  ck.stage = stage;
  ck.config_hash = config_hash(model);
  ck.records = parameter_records(model);
  if (opt) {
    auto st = opt->state_records();
    ck.records.insert(ck.records.end(), st.begin(), st.end());
  }
  ck.records.push_back(io::make_record<double>("meta.steps_done", {1}, {static_cast<double>(steps_done)}));
  return ck;
}

inline std::uint64_t checkpoint_steps(const Checkpoint& ck) {
  const auto recs = ck.by_name();
  auto it = recs.find("meta.steps_done");
  if (it == recs.end()) return 0;
  return static_cast<std::uint64_t>(it->second.as<double>().at(0));
}

/// Stage that must precede `s`.
inline std::optional<Stage> prerequisite(Stage s) {
  switch (s) {
    case Stage::base: return std::nullopt;
    case Stage::intra: return Stage::base;
    case Stage::inter: return Stage::intra;
  }
  return std::nullopt;
}

}  // namespace dcctl
