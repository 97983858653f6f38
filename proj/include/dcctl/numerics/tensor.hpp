#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <type_traits>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dcctl/numerics/errors.hpp"

namespace dcctl {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool& finite_check_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Whether new operations record their inputs for reverse-mode gradients.
inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// When on (the default), every op result is scanned for NaN/Inf.
inline void set_finite_checks(bool on) { detail::finite_check_flag() = on; }
inline bool finite_checks() { return detail::finite_check_flag(); }

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Reference-counted handle to an immutable N-d array that may carry a gradient.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (numel_of(shape) != values.size())
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + to_string(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    std::vector<T> values(numel_of(shape), v);
    return from(std::move(shape), std::move(values), requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }
  static Tensor scalar(T v) { return from({}, {v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::ptrdiff_t i) const {
    const auto r = static_cast<std::ptrdiff_t>(rank());
    if (i < 0) i += r;
    if (i < 0 || i >= r) throw DimensionError("axis out of range for shape " + to_string(shape()));
    return node_->shape[static_cast<std::size_t>(i)];
  }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  /// Mutable access for parameter updates and fixture setup only.
  std::span<T> mutable_data() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  /// Same values, cut from the graph.
  Tensor detach() const { return from(shape(), node_->value, false); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// True when every value is finite. Inspects exponent bits so the loop vectorizes.
template <class T>
bool all_finite(std::span<const T> values) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  constexpr Bits exp_mask = sizeof(T) == 4 ? Bits(0x7f800000u) : Bits(0x7ff0000000000000ull);
  Bits bad = 0;
  for (T v : values) {
    const Bits b = std::bit_cast<Bits>(v);
    bad |= static_cast<Bits>((b & exp_mask) == exp_mask);
  }
  return bad == 0;
}

template <class T>
void check_finite(const Tensor<T>& t, const char* where) {
  if (!all_finite(t.data()))
    throw NumericError(std::string("non-finite value produced by ") + where);
}

namespace detail {

/// Builds an op result; records parents only when gradients are wanted.
template <class T, class Fn>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<std::shared_ptr<Node<T>>> parents, Fn&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool track = false;
  if (grad_enabled())
    for (const auto& p : parents) track = track || (p && p->requires_grad);
  if (track) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::forward<Fn>(backward);
  }
  Tensor<T> out(std::move(n));
  if (finite_checks()) check_finite(out, op);
  return out;
}

template <class T>
bool wants_grad(const std::shared_ptr<Node<T>>& p) {
  return p && p->requires_grad;
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across calls.
template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p && p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node<T>* n : order)
    if (n->backward_fn) n->grad.assign(n->value.size(), T(0));
  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn) {
      n->backward_fn(*n);
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

}  // namespace dcctl
