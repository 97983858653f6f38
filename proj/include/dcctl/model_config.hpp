#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "dcctl/diffusion.hpp"
#include "dcctl/embeddings.hpp"

namespace dcctl {

/// Architecture and ablation settings shared by every model component.
struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t stem_width = 16;
  std::size_t width = 32;
  std::size_t emb_dim = 64;
  std::size_t ffn_ratio = 2;
  std::vector<std::size_t> level_grid{16, 8, 8, 4};
  std::size_t num_classes = 4;
  int steps = 200;
  double beta_start = 1e-4;
  double beta_end = 2e-2;
  double rope_base = 10000.0;
  long delta_row = -1;  // -1: the level grid extent
  long delta_col = -1;
  std::vector<ConditionKind> content_kinds{ConditionKind::edge, ConditionKind::color};
  bool inject_layout = true;  // add the layout embedding at the denoiser input

  // Inter-element switches (ablations). They do not change the parameter set.
  bool order_embedding = true;
  bool layer_transformer = true;
  bool spatial_transformer = true;

  DenoiserConfig denoiser() const {
    DenoiserConfig d;
    d.image_size = image_size;
    d.stem_width = stem_width;
    d.width = width;
    d.emb_dim = emb_dim;
    d.num_classes = num_classes;
    d.level_grid = level_grid;
    d.steps = steps;
    return d;
  }

  NoiseSchedule schedule() const { return NoiseSchedule(steps, beta_start, beta_end); }

  OffsetDelta delta_for(std::size_t grid) const {
    OffsetDelta d = OffsetDelta::for_grid(grid, grid);
    if (delta_row >= 0) d.row = delta_row;
    if (delta_col >= 0) d.col = delta_col;
    return d;
  }

  /// Everything that determines the parameter layout and its meaning.
  std::string fingerprint() const {
    std::ostringstream os;
    os << "image=" << image_size << ";stem=" << stem_width << ";width=" << width << ";emb=" << emb_dim << ";ffn=" << ffn_ratio
       << ";classes=" << num_classes << ";steps=" << steps << ";beta=" << beta_start << ',' << beta_end << ";rope=" << rope_base
       << ";delta=" << delta_row << ',' << delta_col << ";grid=";
    for (auto g : level_grid) os << g << ',';
    os << ";kinds=";
    for (auto k : content_kinds) os << kind_name(k) << ',';
    os << ";inject_layout=" << inject_layout;
    return os.str();
  }

  void validate() const {
    if (width % 4) throw ConfigError("model width must be divisible by 4 for 2-d rotary embedding");
    if (content_kinds.empty()) throw ConfigError("at least one content kind is required");
    for (auto k : content_kinds)
      if (is_layout_kind(k)) throw ConfigError("'" + std::string(kind_name(k)) + "' is a layout kind, not a content kind");
    (void)denoiser();
    (void)schedule();
  }
};

}  // namespace dcctl
