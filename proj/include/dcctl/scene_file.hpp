#pragma once

#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dcctl/config.hpp"
#include "dcctl/model.hpp"
#include "dcctl/scene_synth.hpp"

namespace dcctl {

/// One element of a hand-written scene description.
struct SceneFileElement {
  scene::ElementSpec spec;
  ConditionKind layout = ConditionKind::mask;
  std::optional<std::filesystem::path> content_color, content_edge;
  int line = 0;
};

/// Scene description for sampling:
///
///   [scene]
///   background = 1
///   [element]
///   shape = square        # circle, square, triangle
///   color = red           # palette name or index
///   cx = 12               # center, pixels
///   cy = 14
///   scale = 12            # diameter or side, pixels
///   rotation = 30         # degrees
///   layout = mask         # mask, box, dot
///   order = 1             # 0 = bottom
///   content_color = a.ppm # optional canonical content raster, relative to this file
///   content_edge = a.pgm  # optional
struct SceneFile {
  int background = 0;
  std::vector<SceneFileElement> elements;

  scene::SceneSpec spec() const {
    scene::SceneSpec s;
    s.background = background;
    for (const auto& e : elements) s.elements.push_back(e.spec);
    return s;
  }

  void swap_order(std::size_t i, std::size_t j) {
    if (i >= elements.size() || j >= elements.size())
      throw LookupError("--swap-order index out of range: the scene has " + std::to_string(elements.size()) + " elements");
    std::swap(elements[i].spec.z, elements[j].spec.z);
  }
};

inline constexpr std::array<const char*, 6> kPaletteNames{"red", "green", "blue", "yellow", "magenta", "cyan"};

inline int parse_palette_color(const std::string& v) {
  for (std::size_t i = 0; i < kPaletteNames.size(); ++i)
    if (v == kPaletteNames[i]) return static_cast<int>(i);
  const int idx = config_detail::parse_number<int>(v, "color");
  if (idx < 0 || idx >= static_cast<int>(scene::kElementPalette.size())) throw ConfigError("color index out of range: " + v);
  return idx;
}

inline SceneFile parse_scene_file(std::istream& in, const std::filesystem::path& base_dir = {}) {
  SceneFile f;
  std::string line, section;
  int lineno = 0;
  std::set<std::string> seen;
  std::vector<std::set<std::string>> element_keys;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError("unterminated section header", lineno);
      section = config_detail::trim(line.substr(1, line.size() - 2));
      if (section == "element") {
        f.elements.emplace_back();
        f.elements.back().line = lineno;
        element_keys.emplace_back();
      } else if (section != "scene") {
        throw ParseError("unknown section [" + section + "]", lineno);
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected 'key = value'", lineno);
    const std::string key = config_detail::trim(line.substr(0, eq)), value = config_detail::trim(line.substr(eq + 1));
    try {
      if (section == "scene") {
        if (key != "background") throw ConfigError("unknown scene key '" + key + "'");
        f.background = config_detail::parse_number<int>(value, key);
        if (f.background < 0 || f.background >= static_cast<int>(scene::kNumClasses))
          throw ConfigError("background must lie in [0, " + std::to_string(scene::kNumClasses - 1) + "]");
      } else if (section == "element") {
        auto& e = f.elements.back();
        if (!element_keys.back().insert(key).second) throw ConfigError("duplicate key '" + key + "'");
        if (key == "shape") e.spec.shape = scene::parse_shape(value);
        else if (key == "color") e.spec.color = parse_palette_color(value);
        else if (key == "cx") e.spec.cx = config_detail::parse_number<double>(value, key);
        else if (key == "cy") e.spec.cy = config_detail::parse_number<double>(value, key);
        else if (key == "scale") e.spec.scale = config_detail::parse_number<double>(value, key);
        else if (key == "rotation") e.spec.rotation = config_detail::parse_number<double>(value, key) * std::numbers::pi / 180.0;
        else if (key == "order") e.spec.z = config_detail::parse_number<int>(value, key);
        else if (key == "layout") {
          e.layout = parse_kind(value);
          if (!is_layout_kind(e.layout)) throw ConfigError("'" + value + "' is not a layout kind");
        } else if (key == "content_color") e.content_color = base_dir / value;
        else if (key == "content_edge") e.content_edge = base_dir / value;
        else throw ConfigError("unknown element key '" + key + "'");
      } else {
        throw ConfigError("key outside any section");
      }
    } catch (const ConfigError& ex) {
      throw ParseError(ex.what(), lineno);
    } catch (const LookupError& ex) {
      throw ParseError(ex.what(), lineno);
    }
  }
  if (f.elements.empty()) throw ParseError("scene has no [element] sections", lineno);
  std::set<int> orders;
  for (std::size_t i = 0; i < f.elements.size(); ++i) {
    for (const char* required : {"shape", "color", "cx", "cy", "scale", "order"})
      if (!element_keys[i].contains(required)) throw ParseError("element lacks '" + std::string(required) + "'", f.elements[i].line);
    if (!orders.insert(f.elements[i].spec.z).second) throw ParseError("duplicate layer order", f.elements[i].line);
  }
  if (const auto err = scene::validate(f.spec()); !err.empty()) throw ParseError(err, lineno);
  return f;
}

inline SceneFile load_scene_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw StateError("scene file not found: '" + path.string() + "'");
  return parse_scene_file(in, path.parent_path());
}

/// Conditions for every element; content rasters given in the file replace the rendered ones.
inline scene::ConditionSet scene_file_conditions(const SceneFile& f) {
  scene::ConditionSet cs = scene::extract_conditions(f.spec());
  for (std::size_t i = 0; i < f.elements.size(); ++i) {
    auto load = [](const std::filesystem::path& p, std::size_t channels) {
      if (!std::filesystem::exists(p)) throw StateError("condition file not found: '" + p.string() + "'");
      Image img = read_ppm(p.string());
      if (img.height != scene::kCanvas || img.width != scene::kCanvas)
        throw StateError("condition file '" + p.string() + "' must be " + std::to_string(scene::kCanvas) + "x" + std::to_string(scene::kCanvas));
      if (img.channels == channels) return img;
      Image out(channels, img.height, img.width);
      for (std::size_t p2 = 0; p2 < img.pixels(); ++p2)
        for (std::size_t c = 0; c < channels; ++c)
          out.data[c * img.pixels() + p2] = channels == 1 ? (img.data[p2] > 127 ? 1 : 0) : img.data[(img.channels == 1 ? 0 : c) * img.pixels() + p2];
      return out;
    };
    const auto& e = f.elements[i];
    if (e.content_color) {
      cs.elements[i].content_color = load(*e.content_color, 3);
      if (!e.content_edge) cs.elements[i].content_edge = scene::edge_map(cs.elements[i].content_color);
    }
    if (e.content_edge) cs.elements[i].content_edge = load(*e.content_edge, 1);
  }
  return cs;
}

/// Batch of one scene, elements in file order, for sampling through the full model.
template <class T>
SceneBatch<T> scene_file_batch(const SceneFile& f, const scene::ConditionSet& cs, const std::vector<ConditionKind>& content_kinds) {
  SceneRef ref;
  ref.conditions = &cs;
  ref.class_id = f.background;
  std::vector<int> orders;
  for (std::size_t i = 0; i < f.elements.size(); ++i) {
    ref.elements.push_back(i);
    ref.slot_kinds.push_back(f.elements[i].layout);
    orders.push_back(cs.elements[i].order);
  }
  return make_scene_batch<T>({ref}, orders, content_kinds);
}

}  // namespace dcctl
