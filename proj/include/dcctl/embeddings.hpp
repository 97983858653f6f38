#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dcctl/nn.hpp"
#include "dcctl/numerics/ops.hpp"

namespace dcctl {

/// Token grid coordinate (row, column).
struct GridPos {
  std::int64_t row = 0;
  std::int64_t col = 0;
  friend bool operator==(const GridPos&, const GridPos&) = default;
  friend auto operator<=>(const GridPos&, const GridPos&) = default;
};

/// Row-major positions of an h x w token grid.
inline std::vector<GridPos> grid_positions(std::size_t h, std::size_t w) {
  std::vector<GridPos> out;
  out.reserve(h * w);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) out.push_back({static_cast<std::int64_t>(i), static_cast<std::int64_t>(j)});
  return out;
}

/// Fixed shift applied to content-token positions so they never coincide with
/// layout-token positions.
struct OffsetDelta {
  std::int64_t row = 0;
  std::int64_t col = 0;

  /// The default: the grid extent itself, which makes the two coordinate ranges disjoint.
  static OffsetDelta for_grid(std::size_t h, std::size_t w) {
    return {static_cast<std::int64_t>(h), static_cast<std::int64_t>(w)};
  }
};

inline std::vector<GridPos> content_positions(const std::vector<GridPos>& layout_positions, OffsetDelta delta) {
  std::vector<GridPos> out;
  out.reserve(layout_positions.size());
  for (const auto& p : layout_positions) out.push_back({p.row + delta.row, p.col + delta.col});
  return out;
}

/// Rotary embedding frequencies for one head width.
class RotaryTable {
 public:
  explicit RotaryTable(std::size_t head_dim, double base = 10000.0) : head_dim_(head_dim), base_(base) {
    if (head_dim == 0 || head_dim % 2) throw ConfigError("rotary head_dim must be even, got " + std::to_string(head_dim));
    if (!(base > 0.0)) throw ConfigError("rotary base must be positive");
  }
  std::size_t head_dim() const { return head_dim_; }
  double base() const { return base_; }

  /// Angle frequency of pair p out of `pairs` pairs sharing one axis.
  double frequency(std::size_t p, std::size_t pairs) const {
    return std::pow(base_, -static_cast<double>(p) / static_cast<double>(pairs));
  }

  /// cos/sin tables [N, head_dim/2] for 1-d positions.
  template <class T>
  std::pair<std::vector<T>, std::vector<T>> tables_1d(const std::vector<std::int64_t>& pos) const {
    const std::size_t pairs = head_dim_ / 2;
    std::vector<T> c(pos.size() * pairs), s(pos.size() * pairs);
    for (std::size_t t = 0; t < pos.size(); ++t)
      for (std::size_t p = 0; p < pairs; ++p) {
        const double a = static_cast<double>(pos[t]) * frequency(p, pairs);
        c[t * pairs + p] = static_cast<T>(std::cos(a));
        s[t * pairs + p] = static_cast<T>(std::sin(a));
      }
    return {std::move(c), std::move(s)};
  }

  /// cos/sin tables for 2-d positions: the first half of the pairs rotate with
  /// the row index, the second half with the column index.
  template <class T>
  std::pair<std::vector<T>, std::vector<T>> tables_2d(const std::vector<GridPos>& pos) const {
    if (head_dim_ % 4) throw ConfigError("2-d rotary needs head_dim divisible by 4, got " + std::to_string(head_dim_));
    const std::size_t pairs = head_dim_ / 2, per_axis = pairs / 2;
    std::vector<T> c(pos.size() * pairs), s(pos.size() * pairs);
    for (std::size_t t = 0; t < pos.size(); ++t)
      for (std::size_t p = 0; p < pairs; ++p) {
        const bool row_axis = p < per_axis;
        const double coord = static_cast<double>(row_axis ? pos[t].row : pos[t].col);
        const double a = coord * frequency(row_axis ? p : p - per_axis, per_axis);
        c[t * pairs + p] = static_cast<T>(std::cos(a));
        s[t * pairs + p] = static_cast<T>(std::sin(a));
      }
    return {std::move(c), std::move(s)};
  }

 private:
  std::size_t head_dim_;
  double base_;
};

/// Rotates tokens x [..., N, D] by their 2-d grid positions.
template <class T>
Tensor<T> rope_apply_2d(const Tensor<T>& x, const std::vector<GridPos>& positions, double base = 10000.0) {
  if (x.rank() < 2) throw DimensionError("rope_apply_2d expects [..., N, D]");
  if (positions.size() != x.dim(-2))
    throw DimensionError("rope_apply_2d: " + std::to_string(positions.size()) + " positions for " +
                         std::to_string(x.dim(-2)) + " tokens");
  const std::size_t d = x.dim(-1);
  if (d % 4) throw ConfigError("rope_apply_2d needs width divisible by 4, got " + std::to_string(d));
  auto [c, s] = RotaryTable(d, base).tables_2d<T>(positions);
  return rotate_pairs(x, std::move(c), std::move(s));
}

/// Rotates x [..., L, D] by 1-d integer positions (layer order ids).
template <class T>
Tensor<T> rope_apply_1d(const Tensor<T>& x, const std::vector<std::int64_t>& orders, double base = 10000.0) {
  if (x.rank() < 2) throw DimensionError("rope_apply_1d expects [..., L, D]");
  if (orders.size() != x.dim(-2))
    throw DimensionError("rope_apply_1d: " + std::to_string(orders.size()) + " orders for " +
                         std::to_string(x.dim(-2)) + " layers");
  const std::size_t d = x.dim(-1);
  if (d % 2) throw ConfigError("rope_apply_1d needs even width, got " + std::to_string(d));
  auto [c, s] = RotaryTable(d, base).tables_1d<T>(orders);
  return rotate_pairs(x, std::move(c), std::move(s));
}

/// Interleaved sinusoidal embedding [sin(t f0), cos(t f0), sin(t f1), ...].
template <class T>
std::vector<T> sinusoidal_embedding(double t, std::size_t channels, double max_period = 10000.0) {
  if (channels % 2) throw ConfigError("sinusoidal embedding width must be even");
  const std::size_t half = channels / 2;
  std::vector<T> out(channels);
  for (std::size_t i = 0; i < half; ++i) {
    const double f = std::exp(-std::log(max_period) * static_cast<double>(i) / static_cast<double>(half));
    out[2 * i] = static_cast<T>(std::sin(t * f));
    out[2 * i + 1] = static_cast<T>(std::cos(t * f));
  }
  return out;
}

/// Sinusoidal embedding of timesteps in [0, steps); result [ts.size(), channels].
template <class T>
Tensor<T> timestep_embedding(const std::vector<int>& ts, std::size_t channels, int steps) {
  std::vector<T> out;
  out.reserve(ts.size() * channels);
  for (int t : ts) {
    if (t < 0 || t >= steps)
      throw ContractError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps) + ")");
    auto e = sinusoidal_embedding<T>(static_cast<double>(t), channels);
    out.insert(out.end(), e.begin(), e.end());
  }
  return Tensor<T>::from({ts.size(), channels}, std::move(out));
}

/// Condition kinds sharing one embedding registry: layout kinds and content kinds.
enum class ConditionKind : std::uint8_t { dot = 0, box = 1, mask = 2, edge = 3, color = 4 };

inline constexpr std::array<ConditionKind, 5> kAllConditionKinds{
    ConditionKind::dot, ConditionKind::box, ConditionKind::mask, ConditionKind::edge, ConditionKind::color};

inline std::string_view kind_name(ConditionKind k) {
  switch (k) {
    case ConditionKind::dot: return "dot";
    case ConditionKind::box: return "box";
    case ConditionKind::mask: return "mask";
    case ConditionKind::edge: return "edge";
    case ConditionKind::color: return "color";
  }
  return "?";
}

inline ConditionKind parse_kind(std::string_view name) {
  for (auto k : kAllConditionKinds)
    if (kind_name(k) == name) return k;
  throw LookupError("unknown condition kind '" + std::string(name) + "'");
}

inline bool is_layout_kind(ConditionKind k) { return k == ConditionKind::dot || k == ConditionKind::box || k == ConditionKind::mask; }

/// Learned per-kind vectors injected alongside the time embedding.
template <class T>
class TypeEmbedding {
 public:
  TypeEmbedding() = default;
  TypeEmbedding(std::size_t channels, Rng& rng, std::vector<ConditionKind> registered = {kAllConditionKinds.begin(), kAllConditionKinds.end()})
      : registered_(std::move(registered)) {
    table_ = nn::normal_param<T>({kAllConditionKinds.size(), channels}, rng, 1.0);
  }

  bool registered(ConditionKind k) const {
    for (auto r : registered_)
      if (r == k) return true;
    return false;
  }

  /// [ids.size(), channels]
  Tensor<T> operator()(const std::vector<ConditionKind>& kinds) const {
    std::vector<std::size_t> ids;
    ids.reserve(kinds.size());
    for (auto k : kinds) {
      if (!registered(k)) throw LookupError("condition kind '" + std::string(kind_name(k)) + "' is not registered");
      ids.push_back(static_cast<std::size_t>(k));
    }
    return take_rows(table_, ids);
  }
  Tensor<T> operator()(ConditionKind k) const { return reshape((*this)(std::vector<ConditionKind>{k}), {table_.dim(1)}); }

  const Tensor<T>& table() const { return table_; }
  void collect(const std::string& prefix, nn::NamedParams<T>& out) const { out.emplace_back(prefix + ".table", table_); }

 private:
  Tensor<T> table_;
  std::vector<ConditionKind> registered_;
};

}  // namespace dcctl
