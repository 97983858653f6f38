#pragma once

// Runs the dcctl binary in a scratch directory and captures its output.

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace cli {

namespace fs = std::filesystem;

struct Result {
  int code = -1;
  std::string output;  // stdout and stderr interleaved
};

inline std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

/// A fresh directory under the system temp dir; removed and recreated on construction.
struct Scratch {
  fs::path dir;
  explicit Scratch(const std::string& name) : dir(fs::temp_directory_path() / ("dcctl_" + name)) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  fs::path operator/(const std::string& leaf) const { return dir / leaf; }
};

inline Result run(const std::string& args) {
  static int counter = 0;
  const fs::path out = fs::temp_directory_path() / ("dcctl_cli_out_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  const std::string cmd = std::string(DCCTL_BIN) + " " + args + " > '" + out.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = slurp(out);
  fs::remove(out);
  return r;
}

/// Small model and schedule so that every command finishes in seconds.
inline const char* kTinyConfig = R"([model]
stem_width = 4
width = 8
emb_dim = 8
level_grid = 16, 8
steps = 20

[train]
batch = 2
lr = 1e-3
log_every = 1
checkpoint_every = 2
base_steps = 4
intra_steps = 4
inter_steps = 4

[data]
count = 16
test = 4
seed = 5

[eval]
scenes = 2
seed = 9

[run]
seed = 3
)";

inline std::string quote(const fs::path& p) { return "'" + p.string() + "'"; }

/// Writes the tiny config and dataset, then trains all three stages into `s`.
inline bool train_tiny_pipeline(const Scratch& s, std::string* why = nullptr) {
  write_file(s / "tiny.conf", kTinyConfig);
  const std::string conf = " --config " + quote(s / "tiny.conf");
  auto step = [&](const std::string& args) {
    const auto r = run(args);
    if (r.code != 0 && why) *why = args + " -> " + std::to_string(r.code) + ": " + r.output;
    return r.code == 0;
  };
  return step("gen-data" + conf + " --out " + quote(s / "data")) &&
         step("train --quiet --stage base --data " + quote(s / "data") + conf + " --out " + quote(s / "base.ckpt") + " --log " +
              quote(s / "base.log")) &&
         step("train --quiet --stage intra --data " + quote(s / "data") + conf + " --init " + quote(s / "base.ckpt") + " --out " +
              quote(s / "intra.ckpt") + " --log " + quote(s / "intra.log")) &&
         step("train --quiet --stage inter --data " + quote(s / "data") + conf + " --init " + quote(s / "intra.ckpt") + " --out " +
              quote(s / "inter.ckpt") + " --log " + quote(s / "inter.log"));
}

}  // namespace cli
