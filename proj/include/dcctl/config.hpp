#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dcctl/eval.hpp"
#include "dcctl/model_config.hpp"
#include "dcctl/training.hpp"

namespace dcctl {

/// Everything a command can be configured with.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  int base_steps = 3000;
  int intra_steps = 5000;
  int inter_steps = 5000;
  std::size_t data_count = 2000;
  std::size_t data_test = 200;
  std::uint64_t data_seed = 7;
  eval::Options eval;
  std::uint64_t seed = 0;

  int steps_for(Stage s) const {
    switch (s) {
      case Stage::base: return base_steps;
      case Stage::intra: return intra_steps;
      case Stage::inter: return inter_steps;
    }
    return 0;
  }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class N>
N parse_number(const std::string& v, const std::string& key) {
  std::istringstream is(v);
  N out{};
  is >> out;
  if (!is || !is.eof()) throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  throw ConfigError("'" + key + "' expects true or false, got '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(v);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::vector<ConditionKind> parse_kinds(const std::string& v) {
  std::vector<ConditionKind> out;
  for (const auto& s : split_list(v)) out.push_back(parse_kind(s));
  return out;
}

inline std::vector<std::size_t> parse_sizes(const std::string& v, const std::string& key) {
  std::vector<std::size_t> out;
  for (const auto& s : split_list(v)) out.push_back(parse_number<std::size_t>(s, key));
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

template <class F>
Setter num(F field) {
  return [field](RunConfig& c, const std::string& v, const std::string& key) {
    auto& ref = field(c);
    ref = parse_number<std::remove_reference_t<decltype(ref)>>(v, key);
  };
}

template <class F>
Setter flag(F field) {
  return [field](RunConfig& c, const std::string& v, const std::string& key) { field(c) = parse_bool(v, key); };
}

inline const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"model.image_size", num([](RunConfig& c) -> auto& { return c.model.image_size; })},
      {"model.stem_width", num([](RunConfig& c) -> auto& { return c.model.stem_width; })},
      {"model.width", num([](RunConfig& c) -> auto& { return c.model.width; })},
      {"model.emb_dim", num([](RunConfig& c) -> auto& { return c.model.emb_dim; })},
      {"model.ffn_ratio", num([](RunConfig& c) -> auto& { return c.model.ffn_ratio; })},
      {"model.num_classes", num([](RunConfig& c) -> auto& { return c.model.num_classes; })},
      {"model.steps", num([](RunConfig& c) -> auto& { return c.model.steps; })},
      {"model.beta_start", num([](RunConfig& c) -> auto& { return c.model.beta_start; })},
      {"model.beta_end", num([](RunConfig& c) -> auto& { return c.model.beta_end; })},
      {"model.rope_base", num([](RunConfig& c) -> auto& { return c.model.rope_base; })},
      {"model.delta_row", num([](RunConfig& c) -> auto& { return c.model.delta_row; })},
      {"model.delta_col", num([](RunConfig& c) -> auto& { return c.model.delta_col; })},
      {"model.level_grid", [](RunConfig& c, const std::string& v, const std::string& k) { c.model.level_grid = parse_sizes(v, k); }},
      {"model.content_kinds", [](RunConfig& c, const std::string& v, const std::string&) { c.model.content_kinds = parse_kinds(v); }},
      {"model.inject_layout", flag([](RunConfig& c) -> auto& { return c.model.inject_layout; })},
      {"model.order_embedding", flag([](RunConfig& c) -> auto& { return c.model.order_embedding; })},
      {"model.layer_transformer", flag([](RunConfig& c) -> auto& { return c.model.layer_transformer; })},
      {"model.spatial_transformer", flag([](RunConfig& c) -> auto& { return c.model.spatial_transformer; })},
      {"train.batch", num([](RunConfig& c) -> auto& { return c.train.batch; })},
      {"train.lr", num([](RunConfig& c) -> auto& { return c.train.lr; })},
      {"train.weight_decay", num([](RunConfig& c) -> auto& { return c.train.weight_decay; })},
      {"train.clip_norm", num([](RunConfig& c) -> auto& { return c.train.clip_norm; })},
      {"train.lambda", num([](RunConfig& c) -> auto& { return c.train.lambda; })},
      {"train.class_dropout", num([](RunConfig& c) -> auto& { return c.train.class_dropout; })},
      {"train.log_every", num([](RunConfig& c) -> auto& { return c.train.log_every; })},
      {"train.checkpoint_every", num([](RunConfig& c) -> auto& { return c.train.checkpoint_every; })},
      {"train.layout_kinds", [](RunConfig& c, const std::string& v, const std::string&) { c.train.layout_kinds = parse_kinds(v); }},
      {"train.base_steps", num([](RunConfig& c) -> auto& { return c.base_steps; })},
      {"train.intra_steps", num([](RunConfig& c) -> auto& { return c.intra_steps; })},
      {"train.inter_steps", num([](RunConfig& c) -> auto& { return c.inter_steps; })},
      {"data.count", num([](RunConfig& c) -> auto& { return c.data_count; })},
      {"data.test", num([](RunConfig& c) -> auto& { return c.data_test; })},
      {"data.seed", num([](RunConfig& c) -> auto& { return c.data_seed; })},
      {"eval.scenes", num([](RunConfig& c) -> auto& { return c.eval.scenes; })},
      {"eval.seed", num([](RunConfig& c) -> auto& { return c.eval.seed; })},
      {"eval.batch", num([](RunConfig& c) -> auto& { return c.eval.batch; })},
      {"eval.layouts", [](RunConfig& c, const std::string& v, const std::string&) { c.eval.layouts = parse_kinds(v); }},
      {"run.seed", num([](RunConfig& c) -> auto& { return c.seed; })},
  };
  return table;
}

}  // namespace config_detail

/// Sets one dotted key ("section.name"). Unknown keys are rejected.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  const auto& table = config_detail::setters();
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown configuration key '" + key + "'");
  try {
    it->second(c, value, key);
  } catch (const LookupError& e) {
    throw ConfigError("'" + key + "': " + e.what());
  }
}

/// Reads `key = value` lines grouped under `[section]` headers; `#` starts a comment.
inline void apply_config(RunConfig& c, std::istream& in) {
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError("unterminated section header", lineno);
      section = config_detail::trim(line.substr(1, line.size() - 2));
      if (section.empty()) throw ParseError("empty section name", lineno);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected 'key = value'", lineno);
    if (section.empty()) throw ParseError("key outside any [section]", lineno);
    const std::string key = section + "." + config_detail::trim(line.substr(0, eq));
    try {
      set_config_value(c, key, config_detail::trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ParseError(e.what(), lineno);
    }
  }
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw StateError("config file not found: '" + path.string() + "'");
  RunConfig c;
  apply_config(c, in);
  return c;
}

}  // namespace dcctl
