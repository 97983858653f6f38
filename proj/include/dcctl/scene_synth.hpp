#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dcctl/numerics/rng.hpp"
#include "dcctl/raster.hpp"
#include "dcctl/serialize.hpp"

namespace dcctl::scene {

inline constexpr std::size_t kCanvas = 32;
inline constexpr double kMinScale = 8.0;
inline constexpr double kMaxScale = 16.0;

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// Foreground fill colors. Elements of one scene never share a color.
inline constexpr std::array<Rgb, 6> kElementPalette{{
    {230, 40, 40}, {40, 200, 60}, {50, 90, 235}, {240, 220, 40}, {215, 50, 215}, {40, 215, 225}}};

/// Background colors, indexed by scene class id.
inline constexpr std::array<Rgb, 4> kBackgroundPalette{{{20, 20, 20}, {120, 120, 120}, {30, 30, 100}, {110, 70, 30}}};

inline constexpr std::size_t kNumClasses = kBackgroundPalette.size();

enum class ShapeKind : std::uint8_t { circle = 0, square = 1, triangle = 2 };

inline const char* shape_name(ShapeKind s) {
  switch (s) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
  }
  return "?";
}

inline ShapeKind parse_shape(const std::string& s) {
  if (s == "circle") return ShapeKind::circle;
  if (s == "square") return ShapeKind::square;
  if (s == "triangle") return ShapeKind::triangle;
  throw LookupError("unknown shape '" + s + "'");
}

struct ElementSpec {
  ShapeKind shape = ShapeKind::circle;
  int color = 0;          // index into kElementPalette
  double cx = 16, cy = 16;  // center in pixel units
  double scale = 10;      // diameter / side length in pixels
  double rotation = 0;    // radians
  int z = 0;              // occlusion order, 0 = bottom
  friend bool operator==(const ElementSpec&, const ElementSpec&) = default;
};

struct SceneSpec {
  int background = 0;  // class id, selects kBackgroundPalette
  std::vector<ElementSpec> elements;
  std::uint64_t seed = 0;
  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

/// Distance from the center to the farthest point of the shape.
inline double bounding_radius(const ElementSpec& e) {
  switch (e.shape) {
    case ShapeKind::circle: return e.scale / 2;
    case ShapeKind::square: return e.scale / std::numbers::sqrt2;
    case ShapeKind::triangle: return e.scale / std::numbers::sqrt3;
  }
  return e.scale;
}

/// Pixel-center inside test.
inline bool covers(const ElementSpec& e, double px, double py) {
  const double dx = px - e.cx, dy = py - e.cy;
  switch (e.shape) {
    case ShapeKind::circle: return dx * dx + dy * dy <= e.scale * e.scale / 4;
    case ShapeKind::square: {
      const double c = std::cos(e.rotation), s = std::sin(e.rotation);
      const double u = c * dx + s * dy, v = -s * dx + c * dy;
      return std::abs(u) <= e.scale / 2 && std::abs(v) <= e.scale / 2;
    }
    case ShapeKind::triangle: {
      const double r = e.scale / std::numbers::sqrt3;
      std::array<double, 3> vx, vy;
      for (int k = 0; k < 3; ++k) {
        const double a = e.rotation - std::numbers::pi / 2 + 2 * std::numbers::pi * k / 3;
        vx[static_cast<std::size_t>(k)] = r * std::cos(a);
        vy[static_cast<std::size_t>(k)] = r * std::sin(a);
      }
      bool pos = false, neg = false;
      for (std::size_t k = 0; k < 3; ++k) {
        const std::size_t n = (k + 1) % 3;
        const double cross = (vx[n] - vx[k]) * (dy - vy[k]) - (vy[n] - vy[k]) * (dx - vx[k]);
        pos = pos || cross > 0;
        neg = neg || cross < 0;
      }
      return !(pos && neg);
    }
  }
  return false;
}

/// Binary silhouette on the canvas, 1 x S x S with values 0/1.
inline Image silhouette(const ElementSpec& e, std::size_t size = kCanvas) {
  Image m(1, size, size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x)
      m.at(0, y, x) = covers(e, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5) ? 1 : 0;
  return m;
}

inline std::size_t count_on(const Image& m) {
  return static_cast<std::size_t>(std::count_if(m.data.begin(), m.data.end(), [](std::uint8_t v) { return v != 0; }));
}

inline Image fill_rgb(Rgb c, std::size_t size = kCanvas) {
  Image img(3, size, size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      img.at(0, y, x) = c.r;
      img.at(1, y, x) = c.g;
      img.at(2, y, x) = c.b;
    }
  return img;
}

inline void paint(Image& img, const Image& mask, Rgb c) {
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      if (mask.at(0, y, x)) {
        img.at(0, y, x) = c.r;
        img.at(1, y, x) = c.g;
        img.at(2, y, x) = c.b;
      }
}

/// Element indices in ascending z (back to front).
inline std::vector<std::size_t> paint_order(const SceneSpec& spec) {
  std::vector<std::size_t> idx(spec.elements.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return spec.elements[a].z < spec.elements[b].z; });
  return idx;
}

/// Validates the SceneSpec invariants; returns an empty string when valid.
inline std::string validate(const SceneSpec& spec) {
  if (spec.elements.empty() || spec.elements.size() > 4) return "element count outside 1..4";
  if (spec.background < 0 || static_cast<std::size_t>(spec.background) >= kNumClasses) return "background class out of range";
  std::vector<int> zs;
  std::vector<int> colors;
  for (const auto& e : spec.elements) {
    const double r = bounding_radius(e);
    if (e.cx - r < 0 || e.cy - r < 0 || e.cx + r > kCanvas || e.cy + r > kCanvas) return "element extends past the canvas";
    if (e.scale < kMinScale || e.scale > kMaxScale) return "element scale out of range";
    if (e.color < 0 || static_cast<std::size_t>(e.color) >= kElementPalette.size()) return "color out of range";
    zs.push_back(e.z);
    colors.push_back(e.color);
  }
  std::sort(zs.begin(), zs.end());
  if (std::adjacent_find(zs.begin(), zs.end()) != zs.end()) return "duplicate z-order";
  std::sort(colors.begin(), colors.end());
  if (std::adjacent_find(colors.begin(), colors.end()) != colors.end()) return "duplicate element color";
  return {};
}

struct SceneConstraints {
  int min_elements = 1;
  int max_elements = 4;
  std::optional<bool> require_overlap;  // unset: 50% of multi-element scenes overlap
  std::size_t min_overlap_pixels = 1;
  std::size_t min_visible_pixels = 0;  // per element, after occlusion
};

/// Pixels of `a` that are also in `b`.
inline std::size_t overlap_pixels(const Image& a, const Image& b) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) n += (a.data[i] && b.data[i]) ? 1 : 0;
  return n;
}

/// Visible (unoccluded) silhouette of every element under the scene's z-order.
inline std::vector<Image> visible_masks(const SceneSpec& spec) {
  std::vector<Image> masks;
  for (const auto& e : spec.elements) masks.push_back(silhouette(e));
  std::vector<Image> vis = masks;
  for (std::size_t i = 0; i < masks.size(); ++i)
    for (std::size_t j = 0; j < masks.size(); ++j)
      if (spec.elements[j].z > spec.elements[i].z)
        for (std::size_t p = 0; p < vis[i].data.size(); ++p)
          if (masks[j].data[p]) vis[i].data[p] = 0;
  return vis;
}

inline SceneSpec generate_scene(Rng& rng, const SceneConstraints& cons = {}) {
  SceneSpec spec;
  spec.seed = rng.seed();
  const int k = rng.range(cons.min_elements, cons.max_elements);
  spec.background = static_cast<int>(rng.below(kNumClasses));
  std::vector<int> colors(kElementPalette.size());
  for (std::size_t i = 0; i < colors.size(); ++i) colors[i] = static_cast<int>(i);
  for (std::size_t i = colors.size(); i-- > 1;) std::swap(colors[i], colors[rng.below(i + 1)]);
  const bool want_overlap = cons.require_overlap.value_or(k >= 2 && rng.bernoulli(0.5));
  std::vector<int> zs(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) zs[static_cast<std::size_t>(i)] = i;
  for (std::size_t i = zs.size(); i-- > 1;) std::swap(zs[i], zs[rng.below(i + 1)]);

  for (int attempt = 0; attempt < 100000; ++attempt) {
    spec.elements.clear();
    std::vector<Image> masks;
    for (int i = 0; i < k; ++i) {
      ElementSpec e;
      e.shape = static_cast<ShapeKind>(rng.below(3));
      e.color = colors[static_cast<std::size_t>(i)];
      e.scale = rng.uniform(kMinScale, kMaxScale);
      e.rotation = e.shape == ShapeKind::circle ? 0.0 : rng.uniform(0.0, 2 * std::numbers::pi);
      const double r = bounding_radius(e);
      e.cx = rng.uniform(r, static_cast<double>(kCanvas) - r);
      e.cy = rng.uniform(r, static_cast<double>(kCanvas) - r);
      e.z = zs[static_cast<std::size_t>(i)];
      masks.push_back(silhouette(e));
      spec.elements.push_back(e);
    }
    bool overlapping = false;
    for (std::size_t a = 0; a < masks.size(); ++a)
      for (std::size_t b = a + 1; b < masks.size(); ++b)
        overlapping = overlapping || overlap_pixels(masks[a], masks[b]) >= cons.min_overlap_pixels;
    if (k >= 2 && overlapping != want_overlap) continue;
    if (cons.min_visible_pixels > 0) {
      bool ok = true;
      for (const auto& v : visible_masks(spec)) ok = ok && count_on(v) >= cons.min_visible_pixels;
      if (!ok) continue;
    }
    return spec;
  }
  throw ContractError("scene generator could not satisfy its constraints");
}

/// Painter's algorithm over the background color; hard edges.
inline Image render_scene(const SceneSpec& spec) {
  Image img = fill_rgb(kBackgroundPalette[static_cast<std::size_t>(spec.background)]);
  for (std::size_t i : paint_order(spec)) {
    const auto& e = spec.elements[i];
    paint(img, silhouette(e), kElementPalette[static_cast<std::size_t>(e.color)]);
  }
  return img;
}

/// Element alone on the neutral (zero) canvas at its scene pose.
inline Image render_solo(const ElementSpec& e) {
  Image img(3, kCanvas, kCanvas);
  paint(img, silhouette(e), kElementPalette[static_cast<std::size_t>(e.color)]);
  return img;
}

/// The element moved to the canvas center, same scale and rotation.
inline ElementSpec canonical(const ElementSpec& e) {
  ElementSpec c = e;
  c.cx = static_cast<double>(kCanvas) / 2;
  c.cy = static_cast<double>(kCanvas) / 2;
  return c;
}

struct Decomposition {
  std::vector<Image> solo;       // per element at scene pose
  std::vector<Image> canonical;  // per element at the canvas center
  Image background;              // all elements removed
};

inline Decomposition decompose_elements(const SceneSpec& spec) {
  Decomposition d;
  for (const auto& e : spec.elements) {
    d.solo.push_back(render_solo(e));
    d.canonical.push_back(render_solo(canonical(e)));
  }
  d.background = fill_rgb(kBackgroundPalette[static_cast<std::size_t>(spec.background)]);
  return d;
}

/// Binary edge map: 3x3 Sobel magnitude summed over channels, border replicated, > 0.
inline Image edge_map(const Image& img) {
  Image out(1, img.height, img.width);
  auto px = [&](std::size_t c, std::ptrdiff_t y, std::ptrdiff_t x) {
    y = std::clamp<std::ptrdiff_t>(y, 0, static_cast<std::ptrdiff_t>(img.height) - 1);
    x = std::clamp<std::ptrdiff_t>(x, 0, static_cast<std::ptrdiff_t>(img.width) - 1);
    return static_cast<int>(img.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)));
  };
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const auto yy = static_cast<std::ptrdiff_t>(y), xx = static_cast<std::ptrdiff_t>(x);
      int mag = 0;
      for (std::size_t c = 0; c < img.channels; ++c) {
        const int gx = px(c, yy - 1, xx + 1) + 2 * px(c, yy, xx + 1) + px(c, yy + 1, xx + 1) - px(c, yy - 1, xx - 1) -
                       2 * px(c, yy, xx - 1) - px(c, yy + 1, xx - 1);
        const int gy = px(c, yy + 1, xx - 1) + 2 * px(c, yy + 1, xx) + px(c, yy + 1, xx + 1) - px(c, yy - 1, xx - 1) -
                       2 * px(c, yy - 1, xx) - px(c, yy - 1, xx + 1);
        mag += std::abs(gx) + std::abs(gy);
      }
      out.at(0, y, x) = mag > 0 ? 1 : 0;
    }
  return out;
}

/// Filled bounding rectangle of a binary mask.
inline Image box_of(const Image& mask) {
  Image out(1, mask.height, mask.width);
  std::size_t y0 = mask.height, y1 = 0, x0 = mask.width, x1 = 0;
  for (std::size_t y = 0; y < mask.height; ++y)
    for (std::size_t x = 0; x < mask.width; ++x)
      if (mask.at(0, y, x)) {
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
      }
  if (y0 > y1) return out;
  for (std::size_t y = y0; y <= y1; ++y)
    for (std::size_t x = x0; x <= x1; ++x) out.at(0, y, x) = 1;
  return out;
}

/// Mask centroid in pixel-index coordinates, rounded.
inline std::pair<std::size_t, std::size_t> centroid_of(const Image& mask) {
  double sy = 0, sx = 0, n = 0;
  for (std::size_t y = 0; y < mask.height; ++y)
    for (std::size_t x = 0; x < mask.width; ++x)
      if (mask.at(0, y, x)) {
        sy += static_cast<double>(y);
        sx += static_cast<double>(x);
        n += 1;
      }
  if (n == 0) return {mask.height / 2, mask.width / 2};
  return {static_cast<std::size_t>(std::lround(sy / n)), static_cast<std::size_t>(std::lround(sx / n))};
}

/// Single-pixel map at the mask centroid.
inline Image dot_of(const Image& mask) {
  Image out(1, mask.height, mask.width);
  const auto [y, x] = centroid_of(mask);
  out.at(0, y, x) = 1;
  return out;
}

struct ElementConditions {
  Image content_edge, content_color;  // canonical (centered) canvas
  Image pose_edge, pose_color;        // scene pose; pose_color is the solo render
  Image mask, box, dot;               // 1 x S x S, values 0/1
  int order = 0;                      // layer index, 0 = bottom
  friend bool operator==(const ElementConditions&, const ElementConditions&) = default;
};

struct ConditionSet {
  Image target;       // composed scene
  Image background;   // background render
  Image scene_edge;   // edges of the composed foreground
  Image scene_color;  // composed foreground on the neutral canvas
  std::vector<ElementConditions> elements;  // SceneSpec order
  friend bool operator==(const ConditionSet&, const ConditionSet&) = default;
};

/// Layer index of each element: its rank among the scene's z values.
inline std::vector<int> layer_orders(const SceneSpec& spec) {
  std::vector<int> order(spec.elements.size());
  const auto idx = paint_order(spec);
  for (std::size_t r = 0; r < idx.size(); ++r) order[idx[r]] = static_cast<int>(r);
  return order;
}

inline ElementConditions element_conditions(const ElementSpec& e, int order) {
  ElementConditions ec;
  ec.content_color = render_solo(canonical(e));
  ec.content_edge = edge_map(ec.content_color);
  ec.pose_color = render_solo(e);
  ec.pose_edge = edge_map(ec.pose_color);
  ec.mask = silhouette(e);
  ec.box = box_of(ec.mask);
  ec.dot = dot_of(ec.mask);
  ec.order = order;
  return ec;
}

inline ConditionSet extract_conditions(const SceneSpec& spec) {
  ConditionSet cs;
  cs.target = render_scene(spec);
  const Decomposition d = decompose_elements(spec);
  cs.background = d.background;
  cs.scene_color = Image(3, kCanvas, kCanvas);
  for (std::size_t i : paint_order(spec))
    paint(cs.scene_color, silhouette(spec.elements[i]), kElementPalette[static_cast<std::size_t>(spec.elements[i].color)]);
  cs.scene_edge = edge_map(cs.scene_color);
  const auto orders = layer_orders(spec);
  for (std::size_t i = 0; i < spec.elements.size(); ++i) cs.elements.push_back(element_conditions(spec.elements[i], orders[i]));
  return cs;
}

// ---------------------------------------------------------------------------
// SceneSpec <-> JSON

inline nlohmann::json to_json(const SceneSpec& spec) {
  nlohmann::json j;
  j["background"] = spec.background;
  j["seed"] = spec.seed;
  j["elements"] = nlohmann::json::array();
  for (const auto& e : spec.elements)
    j["elements"].push_back({{"shape", shape_name(e.shape)}, {"color", e.color}, {"cx", e.cx}, {"cy", e.cy},
                             {"scale", e.scale}, {"rotation", e.rotation}, {"z", e.z}});
  return j;
}

inline SceneSpec scene_from_json(const nlohmann::json& j) {
  SceneSpec s;
  s.background = j.at("background").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& je : j.at("elements")) {
    ElementSpec e;
    e.shape = parse_shape(je.at("shape").get<std::string>());
    e.color = je.at("color").get<int>();
    e.cx = je.at("cx").get<double>();
    e.cy = je.at("cy").get<double>();
    e.scale = je.at("scale").get<double>();
    e.rotation = je.at("rotation").get<double>();
    e.z = je.at("z").get<int>();
    s.elements.push_back(e);
  }
  return s;
}

// ---------------------------------------------------------------------------
// On-disk dataset: <dir>/manifest (key=value text) + <dir>/samples.bin (tensor records)

inline constexpr int kDatasetVersion = 1;

struct SampleEntry {
  std::size_t index = 0;
  std::string split;
  std::uint64_t offset = 0, bytes = 0;
  SceneSpec spec;
  ConditionSet conditions;
};

struct Dataset {
  int version = kDatasetVersion;
  std::uint64_t seed = 0;
  std::size_t image_size = kCanvas;
  std::vector<SampleEntry> samples;

  std::vector<const SampleEntry*> split(const std::string& name) const {
    std::vector<const SampleEntry*> out;
    for (const auto& s : samples)
      if (s.split == name) out.push_back(&s);
    return out;
  }
};

/// Scene for dataset sample `index`; each index has its own generator stream.
inline SceneSpec dataset_scene(std::uint64_t seed, std::size_t index) {
  Rng rng(seed, index + 1);
  return generate_scene(rng);
}

inline std::vector<io::Record> condition_records(const ConditionSet& cs) {
  std::vector<io::Record> recs;
  recs.push_back(io::image_record("target", cs.target));
  recs.push_back(io::image_record("background", cs.background));
  recs.push_back(io::image_record("scene.edge", cs.scene_edge));
  recs.push_back(io::image_record("scene.color", cs.scene_color));
  for (std::size_t i = 0; i < cs.elements.size(); ++i) {
    const auto& e = cs.elements[i];
    const std::string p = "e" + std::to_string(i) + ".";
    recs.push_back(io::image_record(p + "content.edge", e.content_edge));
    recs.push_back(io::image_record(p + "content.color", e.content_color));
    recs.push_back(io::image_record(p + "pose.edge", e.pose_edge));
    recs.push_back(io::image_record(p + "pose.color", e.pose_color));
    recs.push_back(io::image_record(p + "mask", e.mask));
    recs.push_back(io::image_record(p + "box", e.box));
    recs.push_back(io::image_record(p + "dot", e.dot));
  }
  return recs;
}

inline ConditionSet conditions_from_records(const std::vector<io::Record>& recs, const SceneSpec& spec) {
  auto find = [&](const std::string& name) -> const io::Record& {
    for (const auto& r : recs)
      if (r.name == name) return r;
    throw ParseError("sample is missing record '" + name + "'");
  };
  ConditionSet cs;
  cs.target = io::record_image(find("target"));
  cs.background = io::record_image(find("background"));
  cs.scene_edge = io::record_image(find("scene.edge"));
  cs.scene_color = io::record_image(find("scene.color"));
  const auto orders = layer_orders(spec);
  for (std::size_t i = 0; i < spec.elements.size(); ++i) {
    const std::string p = "e" + std::to_string(i) + ".";
    ElementConditions e;
    e.content_edge = io::record_image(find(p + "content.edge"));
    e.content_color = io::record_image(find(p + "content.color"));
    e.pose_edge = io::record_image(find(p + "pose.edge"));
    e.pose_color = io::record_image(find(p + "pose.color"));
    e.mask = io::record_image(find(p + "mask"));
    e.box = io::record_image(find(p + "box"));
    e.dot = io::record_image(find(p + "dot"));
    e.order = orders[i];
    cs.elements.push_back(std::move(e));
  }
  return cs;
}

struct DatasetSummary {
  std::size_t count = 0, train = 0, test = 0;
  std::uint64_t bytes = 0;
};

/// Generates `n` samples (the last `test_count` form the test split) and writes
/// the manifest and blob file. Byte-identical for identical arguments.
inline DatasetSummary write_dataset(std::size_t n, const std::filesystem::path& dir, std::uint64_t seed,
                                    std::size_t test_count) {
  std::filesystem::create_directories(dir);
  test_count = std::min(test_count, n);
  std::ofstream blob(dir / "samples.bin", std::ios::binary | std::ios::trunc);
  if (!blob) throw StateError("cannot write '" + (dir / "samples.bin").string() + "'");
  std::ostringstream manifest;
  manifest << "format=dcctl-dataset\nversion=" << kDatasetVersion << "\ncount=" << n << "\nseed=" << seed
           << "\nimage_size=" << kCanvas << "\nblob=samples.bin\n";
  DatasetSummary summary;
  summary.count = n;
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < n; ++i) {
    try {
      const SceneSpec spec = dataset_scene(seed, i);
      const auto recs = condition_records(extract_conditions(spec));
      std::ostringstream buf(std::ios::binary);
      io::put_u32(buf, static_cast<std::uint32_t>(recs.size()));
      for (const auto& r : recs) io::write_record(buf, r);
      const std::string bytes = buf.str();
      blob.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      if (!blob) throw StateError("write failed");
      const bool is_test = i >= n - test_count;
      (is_test ? summary.test : summary.train) += 1;
      manifest << "sample=" << i << " split=" << (is_test ? "test" : "train") << " offset=" << offset
               << " bytes=" << bytes.size() << " spec=" << to_json(spec).dump() << '\n';
      offset += bytes.size();
    } catch (const std::exception& ex) {
      throw StateError("sample " + std::to_string(i) + ": " + ex.what());
    }
  }
  summary.bytes = offset;
  std::ofstream mf(dir / "manifest", std::ios::trunc);
  mf << manifest.str();
  if (!mf) throw StateError("cannot write manifest in '" + dir.string() + "'");
  return summary;
}

/// Reads a dataset written by write_dataset. `with_conditions` loads rasters too.
inline Dataset read_dataset(const std::filesystem::path& dir, bool with_conditions = true) {
  std::ifstream mf(dir / "manifest");
  if (!mf) throw StateError("dataset manifest not found in '" + dir.string() + "'");
  Dataset ds;
  std::string line;
  int lineno = 0;
  std::size_t declared = 0;
  bool have_format = false, have_count = false;
  while (std::getline(mf, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected key=value", lineno);
    const std::string key = line.substr(0, eq);
    if (key == "sample") {
      SampleEntry s;
      std::istringstream ls(line);
      std::string tok;
      while (ls >> tok) {
        const auto e = tok.find('=');
        if (e == std::string::npos) throw ParseError("malformed sample field '" + tok + "'", lineno);
        const std::string k = tok.substr(0, e), v = tok.substr(e + 1);
        try {
          if (k == "sample") s.index = std::stoull(v);
          else if (k == "split") s.split = v;
          else if (k == "offset") s.offset = std::stoull(v);
          else if (k == "bytes") s.bytes = std::stoull(v);
          else if (k == "spec") s.spec = scene_from_json(nlohmann::json::parse(v));
          else throw ParseError("unknown sample field '" + k + "'", lineno);
        } catch (const ParseError&) {
          throw;
        } catch (const std::exception& ex) {
          throw ParseError("bad value for '" + k + "': " + ex.what(), lineno);
        }
      }
      ds.samples.push_back(std::move(s));
      continue;
    }
    const std::string value = line.substr(eq + 1);
    if (key == "format") {
      if (value != "dcctl-dataset") throw ParseError("not a dcctl dataset manifest", lineno);
      have_format = true;
    } else if (key == "version") {
      ds.version = std::stoi(value);
      if (ds.version != kDatasetVersion) throw StateError("unsupported dataset version " + value);
    } else if (key == "count") {
      declared = std::stoull(value);
      have_count = true;
    } else if (key == "seed") {
      ds.seed = std::stoull(value);
    } else if (key == "image_size") {
      ds.image_size = std::stoull(value);
    } else if (key == "blob") {
      if (value != "samples.bin") throw ParseError("unexpected blob name", lineno);
    } else {
      throw ParseError("unknown manifest key '" + key + "'", lineno);
    }
  }
  if (!have_format || !have_count) throw ParseError("manifest lacks format/count header");
  if (declared != ds.samples.size())
    throw ParseError("manifest declares " + std::to_string(declared) + " samples but lists " + std::to_string(ds.samples.size()));
  if (with_conditions && !ds.samples.empty()) {
    std::ifstream blob(dir / "samples.bin", std::ios::binary);
    if (!blob) throw StateError("dataset blob missing in '" + dir.string() + "'");
    for (auto& s : ds.samples) {
      blob.seekg(static_cast<std::streamoff>(s.offset));
      try {
        const std::uint32_t count = io::get_u32(blob);
        std::vector<io::Record> recs;
        for (std::uint32_t r = 0; r < count; ++r) recs.push_back(io::read_record(blob));
        s.conditions = conditions_from_records(recs, s.spec);
      } catch (const std::exception& ex) {
        throw ParseError("sample " + std::to_string(s.index) + ": " + ex.what());
      }
    }
  }
  return ds;
}

/// Held-out evaluation scenes: two overlapping elements, both partly visible.
/// Drawn from generator streams disjoint from every dataset sample.
inline std::vector<SceneSpec> eval_scenes(std::size_t count, std::uint64_t seed) {
  SceneConstraints c;
  c.min_elements = c.max_elements = 2;
  c.require_overlap = true;
  c.min_overlap_pixels = 8;
  c.min_visible_pixels = 8;
  std::vector<SceneSpec> out;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(seed ^ 0x5eed0e7a1ULL, (1ULL << 40) + i);
    out.push_back(generate_scene(rng, c));
  }
  return out;
}

}  // namespace dcctl::scene
