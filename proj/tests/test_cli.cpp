#include <gtest/gtest.h>

#include "cli_support.hpp"

using cli::quote;
using cli::run;
using cli::slurp;

namespace {

/// One tiny trained pipeline shared by the tests that need checkpoints.
const cli::Scratch& trained() {
  static const cli::Scratch s = [] {
    cli::Scratch dir("cli_trained");
    std::string why;
    if (!cli::train_tiny_pipeline(dir, &why)) ADD_FAILURE() << why;
    return dir;
  }();
  return s;
}

std::string conf() { return " --config " + quote(trained() / "tiny.conf"); }

const char* kTwoSquares = "[scene]\nbackground = 0\n"
                          "[element]\nshape = square\ncolor = red\ncx = 12\ncy = 12\nscale = 12\norder = 0\n"
                          "[element]\nshape = circle\ncolor = blue\ncx = 19\ncy = 18\nscale = 12\norder = 1\n";

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("train --data x").code, 1);  // --stage missing
  EXPECT_EQ(run("gen-data").code, 1);        // --out missing
  EXPECT_EQ(run("--help").code, 0);
}

TEST(Cli, BadConfigIsUsageErrorWithLine) {
  cli::Scratch s("cli_badconf");
  cli::write_file(s / "bad.conf", "[train]\nlr = 1e-3\nwarmup = 10\n");
  const auto r = run("gen-data --config " + quote(s / "bad.conf") + " --out " + quote(s / "d"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("line 3"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("warmup"), std::string::npos) << r.output;
}

TEST(Cli, GenDataIsByteDeterministic) {
  cli::Scratch s("cli_gendata");
  ASSERT_EQ(run("gen-data --n 12 --test 2 --seed 4 --out " + quote(s / "a")).code, 0);
  ASSERT_EQ(run("gen-data --n 12 --test 2 --seed 4 --out " + quote(s / "b")).code, 0);
  ASSERT_EQ(run("gen-data --n 12 --test 2 --seed 5 --out " + quote(s / "c")).code, 0);
  EXPECT_EQ(slurp(s / "a" / "samples.bin"), slurp(s / "b" / "samples.bin"));
  EXPECT_EQ(slurp(s / "a" / "manifest"), slurp(s / "b" / "manifest"));
  EXPECT_NE(slurp(s / "a" / "samples.bin"), slurp(s / "c" / "samples.bin"));
  const auto empty = run("gen-data --n 0 --out " + quote(s / "empty"));
  EXPECT_EQ(empty.code, 0) << empty.output;
  EXPECT_TRUE(std::filesystem::exists(s / "empty" / "manifest"));
}

TEST(Cli, StagesNeedTheirPrerequisite) {
  const auto& t = trained();
  const std::string data = " --data " + quote(t / "data");
  const auto no_init = run("train --stage intra" + data + conf() + " --out " + quote(t / "x.ckpt"));
  EXPECT_EQ(no_init.code, 2);
  EXPECT_NE(no_init.output.find("base"), std::string::npos) << no_init.output;

  const auto missing = run("train --stage inter" + data + conf() + " --init " + quote(t / "nowhere.ckpt") + " --out " + quote(t / "x.ckpt"));
  EXPECT_EQ(missing.code, 2);
  EXPECT_NE(missing.output.find("nowhere.ckpt"), std::string::npos) << missing.output;

  const auto wrong = run("train --stage inter" + data + conf() + " --init " + quote(t / "base.ckpt") + " --out " + quote(t / "x.ckpt"));
  EXPECT_EQ(wrong.code, 2);
  EXPECT_NE(wrong.output.find("intra"), std::string::npos) << wrong.output;

  const auto no_data = run("train --stage base --data " + quote(t / "nothing") + conf() + " --out " + quote(t / "x.ckpt"));
  EXPECT_EQ(no_data.code, 2);
}

TEST(Cli, TrainingLogsAreReproducible) {
  const auto& t = trained();
  const auto r = run("train --quiet --stage intra --data " + quote(t / "data") + conf() + " --init " + quote(t / "base.ckpt") + " --out " +
                     quote(t / "intra_again.ckpt") + " --log " + quote(t / "intra_again.log"));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(slurp(t / "intra_again.log"), slurp(t / "intra.log"));
  EXPECT_EQ(slurp(t / "intra_again.ckpt"), slurp(t / "intra.ckpt"));
}

TEST(Cli, ResumeContinuesToTheSameCheckpoint) {
  const auto& t = trained();
  const std::string common = "train --quiet --stage base --data " + quote(t / "data") + conf() + " --out " + quote(t / "resumed.ckpt");
  ASSERT_EQ(run(common + " --steps 2").code, 0);
  const auto r = run(common + " --resume");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(slurp(t / "resumed.ckpt"), slurp(t / "base.ckpt"));
}

TEST(Cli, SampleIsDeterministicAndOrderSensitive) {
  const auto& t = trained();
  cli::write_file(t / "two.scene", kTwoSquares);
  const std::string base = "sample " + quote(t / "two.scene") + conf() + " --checkpoint " + quote(t / "inter.ckpt");
  ASSERT_EQ(run(base + " --out " + quote(t / "a.ppm")).code, 0);
  ASSERT_EQ(run(base + " --out " + quote(t / "b.ppm")).code, 0);
  ASSERT_EQ(run(base + " --swap-order 0 1 --out " + quote(t / "c.ppm")).code, 0);
  ASSERT_EQ(run(base + " --seed 77 --out " + quote(t / "d.ppm")).code, 0);
  EXPECT_EQ(slurp(t / "a.ppm"), slurp(t / "b.ppm"));
  EXPECT_EQ(slurp(t / "a.ppm").size(), std::string("P6\n32 32\n255\n").size() + 32 * 32 * 3);
  EXPECT_NE(slurp(t / "a.ppm"), slurp(t / "c.ppm"));
  EXPECT_NE(slurp(t / "a.ppm"), slurp(t / "d.ppm"));

  const auto early = run("sample " + quote(t / "two.scene") + conf() + " --checkpoint " + quote(t / "intra.ckpt") + " --out " + quote(t / "e.ppm"));
  EXPECT_EQ(early.code, 2);
  EXPECT_NE(early.output.find("intra"), std::string::npos) << early.output;
}

TEST(Cli, SceneFileErrors) {
  const auto& t = trained();
  const std::string tail = conf() + " --checkpoint " + quote(t / "inter.ckpt") + " --out " + quote(t / "x.ppm");
  cli::write_file(t / "malformed.scene", "[scene]\nbackground = 0\n[element]\nshape = hexagon\n");
  const auto bad = run("sample " + quote(t / "malformed.scene") + tail);
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.output.find("line 4"), std::string::npos) << bad.output;

  cli::write_file(t / "content.scene", std::string(kTwoSquares) + "content_color = missing_texture.ppm\n");
  const auto missing = run("sample " + quote(t / "content.scene") + tail);
  EXPECT_EQ(missing.code, 2);
  EXPECT_NE(missing.output.find("missing_texture.ppm"), std::string::npos) << missing.output;

  EXPECT_EQ(run("sample " + quote(t / "absent.scene") + tail).code, 2);
}

TEST(Cli, EvalWritesAReport) {
  const auto& t = trained();
  const auto oracle = run("eval --oracle --scenes 3" + conf() + " --out " + quote(t / "oracle.report"));
  ASSERT_EQ(oracle.code, 0) << oracle.output;
  EXPECT_NE(slurp(t / "oracle.report").find("occlusion.accuracy=1\n"), std::string::npos);
  const auto model = run("eval" + conf() + " --checkpoint " + quote(t / "inter.ckpt") + " --out " + quote(t / "model.report"));
  ASSERT_EQ(model.code, 0) << model.output;
  EXPECT_NE(slurp(t / "model.report").find("layout.mask.iou="), std::string::npos);
  EXPECT_EQ(run("eval" + conf() + " --layouts edge --oracle").code, 1);
}

TEST(Cli, VerifyAndInjectedFault) {
  const auto good = run("verify");
  EXPECT_EQ(good.code, 0) << good.output;
  const auto bad = run("verify --inject-cross-normalize-fault");
  EXPECT_EQ(bad.code, 3);
  EXPECT_NE(bad.output.find("FAIL cross_normalize"), std::string::npos) << bad.output;
}
