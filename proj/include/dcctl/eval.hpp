#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dcctl/model.hpp"
#include "dcctl/scene_synth.hpp"

namespace dcctl::eval {

/// One generation request: a scene with a commanded layer order.
struct Case {
  scene::SceneSpec commanded;  // z values carry the commanded order
  ConditionKind layout = ConditionKind::mask;
  std::uint64_t seed = 0;
  std::size_t scene_index = 0;
  bool swapped = false;
};

/// Maps a batch of cases to generated RGB rasters, one per case.
using Generator = std::function<std::vector<Image>(const std::vector<Case>&)>;

/// Per-pixel label: 0 = background, i + 1 = element i, by nearest palette color.
inline std::vector<int> segment(const Image& img, const scene::SceneSpec& spec) {
  if (img.channels != 3) throw DimensionError("segmentation expects an RGB raster");
  std::vector<scene::Rgb> palette{scene::kBackgroundPalette.at(static_cast<std::size_t>(spec.background))};
  for (const auto& e : spec.elements) palette.push_back(scene::kElementPalette.at(static_cast<std::size_t>(e.color)));
  const std::size_t area = img.height * img.width;
  std::vector<int> label(area, 0);
  for (std::size_t p = 0; p < area; ++p) {
    long best = -1;
    for (std::size_t c = 0; c < palette.size(); ++c) {
      const long dr = long(img.data[p]) - palette[c].r, dg = long(img.data[area + p]) - palette[c].g,
                 db = long(img.data[2 * area + p]) - palette[c].b;
      const long d = dr * dr + dg * dg + db * db;
      if (best < 0 || d < best) {
        best = d;
        label[p] = static_cast<int>(c);
      }
    }
  }
  return label;
}

/// Swaps the z values of elements i and j.
inline scene::SceneSpec swap_order(scene::SceneSpec s, std::size_t i, std::size_t j) {
  if (i >= s.elements.size() || j >= s.elements.size()) throw LookupError("swap index outside the scene");
  std::swap(s.elements[i].z, s.elements[j].z);
  return s;
}

struct CaseScore {
  bool has_overlap = false;
  bool order_correct = false;
  std::vector<double> iou;         // per element
  std::vector<double> color_error; // per element, mean RGB distance over its visible region
};

/// Scores one generated image against its commanded scene.
inline CaseScore score_case(const Image& generated, const scene::SceneSpec& commanded) {
  CaseScore s;
  const auto label = segment(generated, commanded);
  const auto vis = scene::visible_masks(commanded);
  const std::size_t n = commanded.elements.size(), area = label.size();
  std::vector<Image> sil;
  for (const auto& e : commanded.elements) sil.push_back(scene::silhouette(e));

  for (std::size_t i = 0; i < n; ++i) {
    std::size_t inter = 0, uni = 0, count = 0;
    double err = 0;
    const auto c = scene::kElementPalette.at(static_cast<std::size_t>(commanded.elements[i].color));
    for (std::size_t p = 0; p < area; ++p) {
      const bool want = vis[i].data[p] != 0, got = label[p] == static_cast<int>(i + 1);
      inter += want && got;
      uni += want || got;
      if (want) {
        const double dr = double(generated.data[p]) - c.r, dg = double(generated.data[area + p]) - c.g,
                     db = double(generated.data[2 * area + p]) - c.b;
        err += std::sqrt(dr * dr + dg * dg + db * db);
        ++count;
      }
    }
    s.iou.push_back(uni ? double(inter) / double(uni) : 1.0);
    s.color_error.push_back(count ? err / double(count) : 0.0);
  }

  // Occlusion: majority element color inside the pairwise overlap of the topmost pair.
  if (n >= 2) {
    const auto order = scene::paint_order(commanded);
    const std::size_t top = order[n - 1];
    std::size_t votes_top = 0, votes_other = 0;
    for (std::size_t p = 0; p < area; ++p) {
      if (!sil[top].data[p]) continue;
      bool under = false;
      for (std::size_t j = 0; j < n; ++j) under = under || (j != top && sil[j].data[p]);
      if (!under) continue;
      s.has_overlap = true;
      if (label[p] == static_cast<int>(top + 1)) ++votes_top;
      else if (label[p] > 0) ++votes_other;
    }
    s.order_correct = s.has_overlap && votes_top > votes_other;
  }
  return s;
}

struct KindStats {
  double iou = 0;
  std::size_t samples = 0;
  friend bool operator==(const KindStats&, const KindStats&) = default;
};

/// Metrics for one model configuration.
struct Report {
  std::string label = "full";
  std::size_t scenes = 0;
  std::size_t samples = 0;
  std::size_t correct = 0;
  double accuracy = 0;
  std::map<std::string, KindStats> iou;  // by layout kind
  double color_error = 0;                // mean RGB distance, 0..441
  double color_fidelity = 0;             // 1 - color_error / 441.67
  std::map<std::string, double> deltas;  // accuracy deltas against another report

  void validate() const {
    if (accuracy < 0 || accuracy > 1 || color_fidelity < 0 || color_fidelity > 1) throw ContractError("report metric outside [0, 1]");
    for (const auto& [k, v] : iou)
      if (v.iou < 0 || v.iou > 1) throw ContractError("IoU outside [0, 1] for layout '" + k + "'");
  }
  friend bool operator==(const Report&, const Report&) = default;
};

inline constexpr double kMaxRgbDistance = 441.6729559300637;  // sqrt(3) * 255

struct Options {
  std::size_t scenes = 100;
  std::uint64_t seed = 1234;
  std::vector<ConditionKind> layouts{ConditionKind::mask};
  std::size_t batch = 200;
};

/// Every scene in both orders, per layout kind; the same seed for both orders of a scene.
inline std::vector<Case> make_cases(const Options& opt) {
  const auto specs = scene::eval_scenes(opt.scenes, opt.seed);
  std::vector<Case> cases;
  for (auto kind : opt.layouts)
    for (std::size_t i = 0; i < specs.size(); ++i) {
      const std::uint64_t seed = Rng(opt.seed, 0x6576616cULL + i).next_u64();
      cases.push_back({specs[i], kind, seed, i, false});
      cases.push_back({swap_order(specs[i], 0, 1), kind, seed, i, true});
    }
  return cases;
}

inline Report evaluate(const Generator& generate, const Options& opt, const std::string& label = "full") {
  if (opt.scenes == 0) throw ContractError("evaluation needs at least one test scene");
  if (opt.layouts.empty()) throw ContractError("evaluation needs at least one layout kind");
  const auto cases = make_cases(opt);
  Report r;
  r.label = label;
  r.scenes = opt.scenes;
  double color_sum = 0;
  std::size_t color_n = 0, order_n = 0;
  for (std::size_t start = 0; start < cases.size(); start += opt.batch) {
    const std::vector<Case> chunk(cases.begin() + static_cast<std::ptrdiff_t>(start),
                                  cases.begin() + static_cast<std::ptrdiff_t>(std::min(cases.size(), start + opt.batch)));
    const auto images = generate(chunk);
    if (images.size() != chunk.size()) throw ContractError("generator returned the wrong number of images");
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const auto s = score_case(images[i], chunk[i].commanded);
      ++r.samples;
      if (s.has_overlap) {
        ++order_n;
        r.correct += s.order_correct;
      }
      auto& k = r.iou[std::string(kind_name(chunk[i].layout))];
      for (double v : s.iou) {
        k.iou += v;
        ++k.samples;
      }
      for (double e : s.color_error) {
        color_sum += e;
        ++color_n;
      }
    }
  }
  for (auto& [name, k] : r.iou) k.iou = k.samples ? k.iou / double(k.samples) : 0.0;
  r.accuracy = order_n ? double(r.correct) / double(order_n) : 0.0;
  r.color_error = color_n ? color_sum / double(color_n) : 0.0;
  r.color_fidelity = std::clamp(1.0 - r.color_error / kMaxRgbDistance, 0.0, 1.0);
  return r;
}

/// Renders the commanded scene exactly; used to check the harness itself.
inline Generator oracle_generator() {
  return [](const std::vector<Case>& cases) {
    std::vector<Image> out;
    for (const auto& c : cases) out.push_back(scene::render_scene(c.commanded));
    return out;
  };
}

/// Scene batch for commanded scenes; slots follow element index, orders follow z.
template <class T>
SceneBatch<T> batch_for(const std::vector<const scene::ConditionSet*>& conds, const std::vector<scene::SceneSpec>& specs,
                        ConditionKind layout, const std::vector<ConditionKind>& content_kinds) {
  std::vector<SceneRef> refs;
  const std::size_t n = specs.at(0).elements.size();
  std::vector<int> orders;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (specs[i].elements.size() != n) throw DimensionError("scenes in one sampling batch need equal element counts");
    std::vector<std::size_t> idx(n);
    for (std::size_t e = 0; e < n; ++e) idx[e] = e;
    refs.push_back({conds[i], idx, layout, specs[i].background, {}});
  }
  // Orders are per slot; scenes in a batch must agree, so group by order pattern first.
  for (std::size_t e = 0; e < n; ++e) orders.push_back(conds[0]->elements[e].order);
  for (const auto* c : conds)
    for (std::size_t e = 0; e < n; ++e)
      if (c->elements[e].order != orders[e]) throw ContractError("scenes in one sampling batch need the same layer orders");
  return make_scene_batch<T>(refs, orders, content_kinds);
}

/// Generates with the model through the inter-element controller.
template <class T>
Generator model_generator(const Model<T>& m) {
  return [&m](const std::vector<Case>& cases) {
    std::vector<Image> out(cases.size());
    std::vector<scene::ConditionSet> conds;
    conds.reserve(cases.size());
    for (const auto& c : cases) conds.push_back(scene::extract_conditions(c.commanded));
    // group cases sharing an element count, layout kind and layer-order pattern
    std::map<std::pair<std::string, std::vector<int>>, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < cases.size(); ++i) {
      std::vector<int> pattern;
      for (const auto& e : conds[i].elements) pattern.push_back(e.order);
      groups[{std::string(kind_name(cases[i].layout)), pattern}].push_back(i);
    }
    for (const auto& [key, members] : groups) {
      std::vector<const scene::ConditionSet*> cs;
      std::vector<scene::SceneSpec> specs;
      std::vector<std::uint64_t> seeds;
      for (auto i : members) {
        cs.push_back(&conds[i]);
        specs.push_back(cases[i].commanded);
        seeds.push_back(cases[i].seed);
      }
      const auto b = batch_for<T>(cs, specs, cases[members[0]].layout, m.cfg.content_kinds);
      const Tensor<T> x = sample(m, b, seeds, Route::fused);
      for (std::size_t j = 0; j < members.size(); ++j) out[members[j]] = tensor_to_image(x, j);
    }
    return out;
  };
}

// ---------------------------------------------------------------------------
// Report I/O: one key=value per line.

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline void write_report(std::ostream& out, const Report& r) {
  out << "format=dcctl-eval\nversion=1\n";
  out << "label=" << r.label << '\n';
  out << "scenes=" << r.scenes << '\n';
  out << "samples=" << r.samples << '\n';
  out << "occlusion.correct=" << r.correct << '\n';
  out << "occlusion.accuracy=" << format_double(r.accuracy) << '\n';
  for (const auto& [k, v] : r.iou) {
    out << "layout." << k << ".iou=" << format_double(v.iou) << '\n';
    out << "layout." << k << ".samples=" << v.samples << '\n';
  }
  out << "color.error=" << format_double(r.color_error) << '\n';
  out << "color.fidelity=" << format_double(r.color_fidelity) << '\n';
  for (const auto& [k, v] : r.deltas) out << "delta." << k << '=' << format_double(v) << '\n';
}

inline Report read_report(std::istream& in) {
  Report r;
  r.label.clear();
  std::string line;
  int lineno = 0;
  bool have_format = false;
  auto num = [&](const std::string& v) {
    std::size_t used = 0;
    double d = 0;
    try {
      d = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || v.empty()) throw ParseError("bad number '" + v + "'", lineno);
    return d;
  };
  auto count = [&](const std::string& v) { return static_cast<std::size_t>(num(v)); };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected key=value", lineno);
    const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
    if (k == "format") {
      if (v != "dcctl-eval") throw ParseError("not an evaluation report", lineno);
      have_format = true;
    } else if (k == "version") {
      if (v != "1") throw ParseError("unsupported report version " + v, lineno);
    } else if (k == "label") {
      r.label = v;
    } else if (k == "scenes") {
      r.scenes = count(v);
    } else if (k == "samples") {
      r.samples = count(v);
    } else if (k == "occlusion.correct") {
      r.correct = count(v);
    } else if (k == "occlusion.accuracy") {
      r.accuracy = num(v);
    } else if (k == "color.error") {
      r.color_error = num(v);
    } else if (k == "color.fidelity") {
      r.color_fidelity = num(v);
    } else if (k.rfind("delta.", 0) == 0) {
      r.deltas[k.substr(6)] = num(v);
    } else if (k.rfind("layout.", 0) == 0) {
      const auto dot = k.rfind('.');
      const std::string kind = k.substr(7, dot - 7), field = k.substr(dot + 1);
      if (field == "iou") r.iou[kind].iou = num(v);
      else if (field == "samples") r.iou[kind].samples = count(v);
      else throw ParseError("unknown layout field '" + field + "'", lineno);
    } else {
      throw ParseError("unknown report key '" + k + "'", lineno);
    }
  }
  if (!have_format) throw ParseError("missing format line", lineno);
  r.validate();
  return r;
}

inline void save_report(const std::filesystem::path& path, const Report& r) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw StateError("cannot write report '" + path.string() + "'");
  write_report(out, r);
}

inline Report load_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw StateError("report not found: '" + path.string() + "'");
  return read_report(in);
}

/// Human-readable summary.
inline std::string summary(const Report& r) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(3);
  os << r.label << ": accuracy " << r.accuracy << " (" << r.correct << " of " << r.samples << ")";
  for (const auto& [k, v] : r.iou) os << ", " << k << " IoU " << v.iou;
  os << ", color fidelity " << r.color_fidelity;
  for (const auto& [k, v] : r.deltas) os << ", delta " << k << ' ' << v;
  return os.str();
}

}  // namespace dcctl::eval
