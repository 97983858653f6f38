#include <gtest/gtest.h>

#include <sstream>

#include "dcctl/config.hpp"
#include "dcctl/eval.hpp"
#include "dcctl/scene_file.hpp"

using namespace dcctl;

namespace {

eval::Options small_options() {
  eval::Options o;
  o.scenes = 20;
  o.seed = 3;
  o.layouts = {ConditionKind::mask, ConditionKind::box};
  return o;
}

/// Paints the commanded scene with the layer order reversed.
eval::Generator reversed_generator() {
  return [](const std::vector<eval::Case>& cases) {
    std::vector<Image> out;
    for (const auto& c : cases) out.push_back(scene::render_scene(eval::swap_order(c.commanded, 0, 1)));
    return out;
  };
}

}  // namespace

TEST(Eval, OracleScoresPerfectly) {
  const auto r = eval::evaluate(eval::oracle_generator(), small_options());
  EXPECT_EQ(r.samples, 80u);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.correct, 80u);  // every evaluation scene overlaps
  for (const auto& [kind, k] : r.iou) EXPECT_EQ(k.iou, 1.0) << kind;
  EXPECT_EQ(r.color_fidelity, 1.0);
}

TEST(Eval, ReversedOrderScoresZeroAccuracy) {
  const auto r = eval::evaluate(reversed_generator(), small_options());
  EXPECT_EQ(r.accuracy, 0.0);
  for (const auto& [kind, k] : r.iou) EXPECT_LT(k.iou, 1.0) << kind;
}

TEST(Eval, CasesComeInOrderPairsSharingASeed) {
  const auto cases = eval::make_cases(small_options());
  ASSERT_EQ(cases.size(), 80u);
  for (std::size_t i = 0; i < cases.size(); i += 2) {
    EXPECT_FALSE(cases[i].swapped);
    EXPECT_TRUE(cases[i + 1].swapped);
    EXPECT_EQ(cases[i].seed, cases[i + 1].seed);
    EXPECT_EQ(cases[i].commanded.elements[0].z, cases[i + 1].commanded.elements[1].z);
  }
}

TEST(Eval, SegmentationUsesNearestPaletteColor) {
  scene::SceneSpec spec;
  spec.background = 0;
  spec.elements.push_back({scene::ShapeKind::square, 0, 16, 16, 10, 0, 0});
  Image img = scene::render_scene(spec);
  const auto label = eval::segment(img, spec);
  const Image sil = scene::silhouette(spec.elements[0]);
  for (std::size_t p = 0; p < label.size(); ++p) EXPECT_EQ(label[p], sil.data[p] ? 1 : 0);
  EXPECT_THROW(eval::segment(Image(1, 32, 32), spec), DimensionError);
}

TEST(Report, RoundTrip) {
  auto r = eval::evaluate(eval::oracle_generator(), small_options(), "no_layer");
  r.deltas["accuracy"] = -0.25;
  std::stringstream ss;
  eval::write_report(ss, r);
  EXPECT_EQ(eval::read_report(ss), r);
}

TEST(Report, RejectsMalformedInput) {
  std::istringstream unknown("format=dcctl-eval\nversion=1\nbogus=1\n");
  EXPECT_THROW(eval::read_report(unknown), ParseError);
  std::istringstream no_format("label=x\n");
  EXPECT_THROW(eval::read_report(no_format), ParseError);
  std::istringstream out_of_range("format=dcctl-eval\nversion=1\nocclusion.accuracy=1.5\n");
  EXPECT_THROW(eval::read_report(out_of_range), ContractError);
}

TEST(Config, FileValuesAndOverrides) {
  RunConfig c;
  std::istringstream in("# comment\n[model]\nwidth = 16\nlevel_grid = 16, 8\n[train]\nlr = 0.5\nlayout_kinds = mask, box\n[run]\nseed = 9\n");
  apply_config(c, in);
  EXPECT_EQ(c.model.width, 16u);
  EXPECT_EQ(c.model.level_grid, (std::vector<std::size_t>{16, 8}));
  EXPECT_EQ(c.train.lr, 0.5);
  EXPECT_EQ(c.train.layout_kinds, (std::vector<ConditionKind>{ConditionKind::mask, ConditionKind::box}));
  EXPECT_EQ(c.seed, 9u);
  set_config_value(c, "run.seed", "11");  // later values win
  EXPECT_EQ(c.seed, 11u);
}

TEST(Config, UnknownKeysAndBadValuesAreRejected) {
  RunConfig c;
  EXPECT_THROW(set_config_value(c, "model.depth", "3"), ConfigError);
  EXPECT_THROW(set_config_value(c, "train.lr", "fast"), ConfigError);
  EXPECT_THROW(set_config_value(c, "train.layout_kinds", "depth"), ConfigError);
  std::istringstream in("[train]\nlr = 1\nmomentum = 0.9\n");
  try {
    apply_config(c, in);
    FAIL() << "unknown key accepted";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3);
  }
  std::istringstream orphan("seed = 1\n");
  EXPECT_THROW(apply_config(c, orphan), ParseError);
}

TEST(SceneFile, ParsesElementsAndSwapsOrders) {
  std::istringstream in(
      "[scene]\nbackground = 2\n[element]\nshape = circle\ncolor = green\ncx = 10\ncy = 12\nscale = 10\norder = 3\n"
      "[element]\nshape = triangle\ncolor = 4\ncx = 20\ncy = 18\nscale = 9\nrotation = 90\nlayout = dot\norder = 7\n");
  auto f = parse_scene_file(in);
  ASSERT_EQ(f.elements.size(), 2u);
  EXPECT_EQ(f.background, 2);
  EXPECT_EQ(f.elements[0].spec.color, 1);
  EXPECT_EQ(f.elements[1].layout, ConditionKind::dot);
  EXPECT_NEAR(f.elements[1].spec.rotation, std::numbers::pi / 2, 1e-12);
  f.swap_order(0, 1);
  EXPECT_EQ(f.elements[0].spec.z, 7);
  EXPECT_EQ(f.elements[1].spec.z, 3);
}

TEST(SceneFile, ErrorsCarryLineNumbers) {
  const std::string head = "[scene]\nbackground = 0\n[element]\nshape = circle\ncolor = red\ncx = 10\ncy = 10\nscale = 10\n";
  auto line_of = [](const std::string& text) {
    std::istringstream in(text);
    try {
      parse_scene_file(in);
    } catch (const ParseError& e) {
      return e.line();
    }
    return -1;
  };
  EXPECT_EQ(line_of(head + "order = x\n"), 9);
  EXPECT_EQ(line_of(head + "order = 0\nlayout = edge\n"), 10);
  EXPECT_EQ(line_of(head + "order = 0\nshape = square\n"), 10);
  EXPECT_EQ(line_of(head + "order = 0\n[bogus]\n"), 10);
  EXPECT_EQ(line_of("[scene]\nbackground = 9\n"), 2);
  EXPECT_EQ(line_of(head), 3);  // missing order, reported at the element header
  EXPECT_EQ(line_of(head + "order = 0\n[element]\nshape = square\ncolor = red\ncx = 20\ncy = 20\nscale = 9\norder = 0\n"), 10);
}
