#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include <unistd.h>

#include <gtest/gtest.h>

#include "dcctl/scene_synth.hpp"

using namespace dcctl;
using namespace dcctl::scene;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("dcctl_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  return p;
}

// Pixels whose 4-neighbourhood leaves the mask.
Image boundary_of(const Image& m) {
  Image b(1, m.height, m.width);
  for (std::size_t y = 0; y < m.height; ++y)
    for (std::size_t x = 0; x < m.width; ++x) {
      if (!m.at(0, y, x)) continue;
      const bool edge = y == 0 || x == 0 || y + 1 == m.height || x + 1 == m.width || !m.at(0, y - 1, x) ||
                        !m.at(0, y + 1, x) || !m.at(0, y, x - 1) || !m.at(0, y, x + 1);
      b.at(0, y, x) = edge ? 1 : 0;
    }
  return b;
}

Image dilate(const Image& m) {
  Image d(1, m.height, m.width);
  for (std::size_t y = 0; y < m.height; ++y)
    for (std::size_t x = 0; x < m.width; ++x)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const auto yy = static_cast<std::ptrdiff_t>(y) + dy, xx = static_cast<std::ptrdiff_t>(x) + dx;
          if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(m.height) || xx >= static_cast<std::ptrdiff_t>(m.width))
            continue;
          if (m.at(0, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx))) d.at(0, y, x) = 1;
        }
  return d;
}

Rgb pixel(const Image& img, std::size_t y, std::size_t x) { return {img.at(0, y, x), img.at(1, y, x), img.at(2, y, x)}; }

}  // namespace

TEST(SceneSynth, SameSeedSameScene) {
  Rng a(42, 3), b(42, 3);
  EXPECT_EQ(generate_scene(a), generate_scene(b));
}

TEST(SceneSynth, ValidatorSweepAndCountCoverage) {
  std::set<std::size_t> counts;
  std::size_t multi = 0, overlapping = 0;
  for (std::size_t i = 0; i < 1000; ++i) {
    const SceneSpec s = dataset_scene(11, i);
    ASSERT_EQ(validate(s), "") << "scene " << i;
    counts.insert(s.elements.size());
    // every silhouette is nonempty and lies on the canvas
    for (const auto& e : s.elements) EXPECT_GT(count_on(silhouette(e)), 0u);
    if (s.elements.size() >= 2) {
      ++multi;
      bool any = false;
      for (std::size_t a = 0; a < s.elements.size(); ++a)
        for (std::size_t b = a + 1; b < s.elements.size(); ++b)
          any = any || overlap_pixels(silhouette(s.elements[a]), silhouette(s.elements[b])) > 0;
      overlapping += any ? 1 : 0;
    }
  }
  EXPECT_EQ(counts, (std::set<std::size_t>{1, 2, 3, 4}));
  const double frac = static_cast<double>(overlapping) / static_cast<double>(multi);
  EXPECT_NEAR(frac, 0.5, 0.07);
}

TEST(SceneSynth, NoElementsRendersBackground) {
  SceneSpec s;
  s.background = 2;
  const Image img = render_scene(s);
  EXPECT_EQ(img, fill_rgb(kBackgroundPalette[2]));
}

TEST(SceneSynth, DisjointSceneIsUnionOfSoloRenders) {
  SceneSpec s;
  s.background = 0;
  s.elements = {{ShapeKind::circle, 0, 8, 8, 10, 0, 1}, {ShapeKind::square, 2, 23, 23, 9, 0.3, 0}};
  const Image img = render_scene(s);
  const Decomposition d = decompose_elements(s);
  const Image m0 = silhouette(s.elements[0]), m1 = silhouette(s.elements[1]);
  ASSERT_EQ(overlap_pixels(m0, m1), 0u);
  for (std::size_t y = 0; y < kCanvas; ++y)
    for (std::size_t x = 0; x < kCanvas; ++x) {
      const Rgb got = pixel(img, y, x);
      if (m0.at(0, y, x))
        EXPECT_EQ(got, pixel(d.solo[0], y, x));
      else if (m1.at(0, y, x))
        EXPECT_EQ(got, pixel(d.solo[1], y, x));
      else
        EXPECT_EQ(got, kBackgroundPalette[0]);
    }
}

TEST(SceneSynth, OverlapTakesHigherZColor) {
  SceneSpec s;
  s.elements = {{ShapeKind::circle, 0, 14, 16, 14, 0, 0}, {ShapeKind::square, 1, 19, 16, 12, 0.5, 1}};
  for (int flip = 0; flip < 2; ++flip) {
    if (flip) std::swap(s.elements[0].z, s.elements[1].z);
    const Image img = render_scene(s);
    const Image m0 = silhouette(s.elements[0]), m1 = silhouette(s.elements[1]);
    const auto& top = s.elements[0].z > s.elements[1].z ? s.elements[0] : s.elements[1];
    std::size_t n = 0;
    for (std::size_t y = 0; y < kCanvas; ++y)
      for (std::size_t x = 0; x < kCanvas; ++x)
        if (m0.at(0, y, x) && m1.at(0, y, x)) {
          EXPECT_EQ(pixel(img, y, x), kElementPalette[static_cast<std::size_t>(top.color)]);
          ++n;
        }
    EXPECT_GT(n, 0u);
  }
}

TEST(SceneSynth, RecomposingSoloRendersReproducesTarget) {
  for (std::size_t i = 0; i < 200; ++i) {
    const SceneSpec s = dataset_scene(5, i);
    const Decomposition d = decompose_elements(s);
    Image img = d.background;
    for (std::size_t k : paint_order(s)) paint(img, silhouette(s.elements[k]), kElementPalette[static_cast<std::size_t>(s.elements[k].color)]);
    ASSERT_EQ(img, render_scene(s));
    // background render has no element pixels
    for (std::size_t y = 0; y < kCanvas; ++y)
      for (std::size_t x = 0; x < kCanvas; ++x) ASSERT_EQ(pixel(d.background, y, x), kBackgroundPalette[static_cast<std::size_t>(s.background)]);
  }
}

TEST(SceneSynth, NonOverlappingSoloRendersMatchTargetCrops) {
  std::size_t checked = 0;
  for (std::size_t i = 0; i < 300 && checked < 30; ++i) {
    const SceneSpec s = dataset_scene(9, i);
    bool overlap = false;
    for (std::size_t a = 0; a < s.elements.size(); ++a)
      for (std::size_t b = a + 1; b < s.elements.size(); ++b)
        overlap = overlap || overlap_pixels(silhouette(s.elements[a]), silhouette(s.elements[b])) > 0;
    if (overlap) continue;
    ++checked;
    const Image img = render_scene(s);
    const Decomposition d = decompose_elements(s);
    for (std::size_t k = 0; k < s.elements.size(); ++k) {
      const Image m = silhouette(s.elements[k]);
      for (std::size_t y = 0; y < kCanvas; ++y)
        for (std::size_t x = 0; x < kCanvas; ++x)
          if (m.at(0, y, x)) {
            ASSERT_EQ(pixel(img, y, x), pixel(d.solo[k], y, x));
          }
    }
  }
  EXPECT_GE(checked, 30u);
}

TEST(SceneSynth, FullyOccludedElementStillRendersCompletely) {
  SceneSpec s;
  s.elements = {{ShapeKind::circle, 0, 16, 16, 8, 0, 0}, {ShapeKind::square, 1, 16, 16, 16, 0, 1}};
  const Image vis = visible_masks(s)[0];
  EXPECT_EQ(count_on(vis), 0u);
  const Decomposition d = decompose_elements(s);
  const Image m = silhouette(s.elements[0]);
  for (std::size_t y = 0; y < kCanvas; ++y)
    for (std::size_t x = 0; x < kCanvas; ++x)
      if (m.at(0, y, x)) {
        EXPECT_EQ(pixel(d.solo[0], y, x), kElementPalette[0]);
      }
}

TEST(SceneSynth, CircleDotSitsAtCentroid) {
  ElementSpec e{ShapeKind::circle, 3, 12.3, 19.8, 11, 0, 0};
  const ElementConditions ec = element_conditions(e, 0);
  EXPECT_EQ(count_on(ec.dot), 1u);
  double sy = 0, sx = 0, n = 0;
  for (std::size_t y = 0; y < kCanvas; ++y)
    for (std::size_t x = 0; x < kCanvas; ++x)
      if (ec.mask.at(0, y, x)) {
        sy += static_cast<double>(y);
        sx += static_cast<double>(x);
        ++n;
      }
  EXPECT_EQ(ec.dot.at(0, static_cast<std::size_t>(std::lround(sy / n)), static_cast<std::size_t>(std::lround(sx / n))), 1);
}

TEST(SceneSynth, LayoutHierarchyAndEdges) {
  for (std::size_t i = 0; i < 200; ++i) {
    const SceneSpec s = dataset_scene(21, i);
    const ConditionSet cs = extract_conditions(s);
    ASSERT_EQ(cs.elements.size(), s.elements.size());
    for (std::size_t k = 0; k < s.elements.size(); ++k) {
      const auto& ec = cs.elements[k];
      EXPECT_EQ(ec.mask, silhouette(s.elements[k]));
      EXPECT_GE(count_on(ec.box), count_on(ec.mask));
      const Image db = dilate(boundary_of(ec.mask));
      for (std::size_t p = 0; p < ec.mask.data.size(); ++p) {
        ASSERT_TRUE(!ec.mask.data[p] || ec.box.data[p]) << "mask outside box";
        ASSERT_TRUE(!ec.dot.data[p] || ec.box.data[p]) << "dot outside box";
        ASSERT_LE(ec.pose_edge.data[p], 1);
        ASSERT_TRUE(!ec.pose_edge.data[p] || db.data[p]) << "edge pixel away from the boundary";
      }
      // color map constant within the silhouette
      const Rgb fill = kElementPalette[static_cast<std::size_t>(s.elements[k].color)];
      for (std::size_t y = 0; y < kCanvas; ++y)
        for (std::size_t x = 0; x < kCanvas; ++x)
          if (ec.mask.at(0, y, x)) {
            ASSERT_EQ(pixel(ec.pose_color, y, x), fill);
          }
      // canonical content is centered
      const auto [cy, cx] = centroid_of(silhouette(canonical(s.elements[k])));
      EXPECT_NEAR(static_cast<double>(cy), 15.5, 1.0);
      EXPECT_NEAR(static_cast<double>(cx), 15.5, 1.0);
    }
  }
}

TEST(SceneSynth, OrdersFollowZ) {
  SceneSpec s;
  s.elements = {{ShapeKind::circle, 0, 8, 8, 9, 0, 2}, {ShapeKind::circle, 1, 24, 8, 9, 0, 0}, {ShapeKind::circle, 2, 16, 24, 9, 0, 1}};
  EXPECT_EQ(layer_orders(s), (std::vector<int>{2, 0, 1}));
}

TEST(SceneSynth, EvalScenesMeetConstraints) {
  const auto scenes = eval_scenes(50, 3);
  for (const auto& s : scenes) {
    ASSERT_EQ(s.elements.size(), 2u);
    ASSERT_EQ(validate(s), "");
    EXPECT_GE(overlap_pixels(silhouette(s.elements[0]), silhouette(s.elements[1])), 8u);
    for (const auto& v : visible_masks(s)) EXPECT_GE(count_on(v), 8u);
  }
  // disjoint from dataset streams
  for (std::size_t i = 0; i < 50; ++i) EXPECT_NE(scenes[i], dataset_scene(3, i));
}

TEST(Dataset, TenSamplesRoundTripAndRegenerateIdentically) {
  const auto a = temp_dir("ds_a"), b = temp_dir("ds_b");
  const auto sum = write_dataset(10, a, 77, 2);
  EXPECT_EQ(sum.count, 10u);
  EXPECT_EQ(sum.train, 8u);
  EXPECT_EQ(sum.test, 2u);
  write_dataset(10, b, 77, 2);
  EXPECT_EQ(slurp(a / "manifest"), slurp(b / "manifest"));
  EXPECT_EQ(slurp(a / "samples.bin"), slurp(b / "samples.bin"));

  const Dataset ds = read_dataset(a);
  ASSERT_EQ(ds.samples.size(), 10u);
  EXPECT_EQ(ds.seed, 77u);
  EXPECT_EQ(ds.split("test").size(), 2u);
  for (std::size_t i = 0; i < 10; ++i) {
    const SceneSpec expect = dataset_scene(77, i);
    EXPECT_EQ(ds.samples[i].spec, expect);
    EXPECT_EQ(ds.samples[i].conditions, extract_conditions(expect));
  }
  std::filesystem::remove_all(a);
  std::filesystem::remove_all(b);
}

TEST(Dataset, EmptyDatasetIsValid) {
  const auto d = temp_dir("ds_empty");
  write_dataset(0, d, 1, 0);
  EXPECT_TRUE(read_dataset(d).samples.empty());
  std::filesystem::remove_all(d);
}

TEST(Dataset, CorruptManifestReportsLine) {
  const auto d = temp_dir("ds_bad");
  write_dataset(2, d, 1, 0);
  {
    std::ofstream out(d / "manifest", std::ios::app);
    out << "bogus line\n";
  }
  try {
    read_dataset(d);
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 9);
  }
  std::filesystem::remove_all(d);
}

TEST(Dataset, MissingDirectoryIsStateError) {
  EXPECT_THROW(read_dataset("/nonexistent/dcctl"), StateError);
}
