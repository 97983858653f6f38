#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dcctl/numerics/gemm.hpp"
#include "dcctl/numerics/tensor.hpp"

namespace dcctl {

namespace detail {

inline std::size_t normalize_axis(std::ptrdiff_t axis, std::size_t rank) {
  const auto r = static_cast<std::ptrdiff_t>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError("axis out of range");
  return static_cast<std::size_t>(axis);
}

/// Splits a shape around `axis` into (outer, extent, inner) element counts.
inline void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& extent,
                       std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;  // per output axis, 0 where broadcast
};

inline Broadcast broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Broadcast bc;
  bc.out.assign(r, 1);
  bc.stride_a.assign(r, 0);
  bc.stride_b.assign(r, 0);
  std::size_t sa = 1, sb = 1;
  for (std::size_t i = r; i-- > 0;) {
    const std::size_t ia = i + a.size() >= r ? a[i + a.size() - r] : 1;
    const std::size_t ib = i + b.size() >= r ? b[i + b.size() - r] : 1;
    if (ia != ib && ia != 1 && ib != 1)
      throw DimensionError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    bc.out[i] = std::max(ia, ib);
    bc.stride_a[i] = ia == 1 ? 0 : sa;
    bc.stride_b[i] = ib == 1 ? 0 : sb;
    sa *= ia;
    sb *= ib;
  }
  return bc;
}

/// Calls fn(out_index, a_index, b_index) for every output element.
template <class Fn>
void for_each_broadcast(const Broadcast& bc, Fn&& fn) {
  const std::size_t r = bc.out.size();
  if (r == 0) {
    fn(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t last = bc.out[r - 1];
  const std::size_t la = bc.stride_a[r - 1], lb = bc.stride_b[r - 1];
  const std::size_t total = numel_of(bc.out);
  if (total == 0) return;
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < total; o += last) {
    for (std::size_t j = 0; j < last; ++j) fn(o + j, ia + j * la, ib + j * lb);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += bc.stride_a[d];
      ib += bc.stride_b[d];
      if (idx[d] < bc.out[d]) break;
      ia -= bc.stride_a[d] * idx[d];
      ib -= bc.stride_b[d] * idx[d];
      idx[d] = 0;
    }
  }
}

template <class T>
std::vector<std::shared_ptr<Node<T>>> parents_of(std::initializer_list<Tensor<T>> ts) {
  std::vector<std::shared_ptr<Node<T>>> out;
  for (const auto& t : ts)
    if (t.defined()) out.push_back(t.node_ptr());
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (numpy-style broadcasting)

namespace detail {

template <class T, class Fwd, class DA, class DB>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, DA da,
                    DB db) {
  if (a.shape() == b.shape()) {
    std::vector<T> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
    auto an = a.node_ptr(), bn = b.node_ptr();
    return make_result<T>(name, a.shape(), std::move(out), {an, bn}, [an, bn, da, db](Node<T>& n) {
      const auto& av = an->value;
      const auto& bv = bn->value;
      if (an->requires_grad) {
        auto& g = an->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * da(av[i], bv[i]);
      }
      if (bn->requires_grad) {
        auto& g = bn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * db(av[i], bv[i]);
      }
    });
  }
  Broadcast bc = broadcast_shapes(a.shape(), b.shape());
  std::vector<T> out(numel_of(bc.out));
  const auto& av = a.values();
  const auto& bv = b.values();
  for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = fwd(av[i], bv[j]); });
  auto an = a.node_ptr(), bn = b.node_ptr();
  Shape shape = bc.out;
  return make_result<T>(name, std::move(shape), std::move(out), {an, bn},
                        [an, bn, bc, da, db](Node<T>& n) {
                          const auto& av = an->value;
                          const auto& bv = bn->value;
                          T* ga = an->requires_grad ? an->ensure_grad().data() : nullptr;
                          T* gb = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
                          for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) {
                            if (ga) ga[i] += n.grad[o] * da(av[i], bv[j]);
                            if (gb) gb[j] += n.grad[o] * db(av[i], bv[j]);
                          });
                        });
}

/// Elementwise op whose forward values are already computed.
template <class T, class D>
Tensor<T> unary_result(const char* name, const Tensor<T>& x, std::vector<T> out, D deriv) {
  auto xn = x.node_ptr();
  return make_result<T>(name, x.shape(), std::move(out), {xn}, [xn, deriv](Node<T>& n) {
    auto& g = xn->ensure_grad();
    const auto& xv = xn->value;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * deriv(xv[i], n.value[i]);
  });
}

template <class T>
using ArrayMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <class T>
using ConstArrayMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
template <class T>
using AlignedArray = Eigen::Array<T, Eigen::Dynamic, 1>;

/// Evaluates a vectorized expression of `x` into Eigen-owned (aligned) storage
/// before copying out. Eigen splits an unaligned destination into scalar and
/// packet parts by address, and the two use different exp kernels.
template <class T, class Expr>
std::vector<T> eval_aligned(const std::vector<T>& x, Expr expr) {
  const ConstArrayMap<T> xa(x.data(), static_cast<Eigen::Index>(x.size()));
  const AlignedArray<T> tmp = expr(xa);
  return std::vector<T>(tmp.data(), tmp.data() + tmp.size());
}

/// Row softmax of `row` in place on aligned scratch, with the logits scaled first.
template <class T>
void softmax_row(T* row, std::size_t n, T scale, AlignedArray<T>& scratch) {
  scratch = Eigen::Map<const AlignedArray<T>>(row, static_cast<Eigen::Index>(n));
  scratch = ((scratch - scratch.maxCoeff()) * scale).exp();
  scratch /= scratch.sum();
  std::copy(scratch.data(), scratch.data() + scratch.size(), row);
}

template <class T, class Fwd, class D>
Tensor<T> unary_op(const char* name, const Tensor<T>& x, Fwd fwd, D deriv) {
  std::vector<T> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  auto xn = x.node_ptr();
  return make_result<T>(name, x.shape(), std::move(out), {xn}, [xn, deriv](Node<T>& n) {
    auto& g = xn->ensure_grad();
    const auto& xv = xn->value;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * deriv(xv[i], n.value[i]);
  });
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary_op<T>(
      "scale", x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary_op<T>(
      "add_scalar", x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary_op<T>(
      "square", x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <class T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary_op<T>(
      "abs", x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return detail::unary_op<T>(
      "sqrt", x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary_op<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

namespace detail {
template <class T>
T logistic(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}
}  // namespace detail

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out = detail::eval_aligned(x.values(), [](const auto& xa) { return (T(1) + (-xa).exp()).inverse(); });
  return detail::unary_result<T>("sigmoid", x, std::move(out), [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  std::vector<T> out = detail::eval_aligned(x.values(), [](const auto& xa) { return xa / (T(1) + (-xa).exp()); });
  return detail::unary_result<T>(
      "silu", x, std::move(out),
      [](T v, T) {
        const T s = detail::logistic(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  return detail::unary_op<T>(
      "gelu", x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) {
        return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  auto xn = x.node_ptr();
  return detail::make_result<T>("sum", {}, {s}, {xn}, [xn](Node<T>& n) {
    auto& g = xn->ensure_grad();
    for (auto& v : g) v += n.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Sum over one axis; the axis is removed unless keepdim.
template <class T>
Tensor<T> sum_axis(const Tensor<T>& x, std::ptrdiff_t axis_in, bool keepdim = false) {
  const std::size_t axis = detail::normalize_axis(axis_in, x.rank());
  std::size_t outer, extent, inner;
  detail::split_axis(x.shape(), axis, outer, extent, inner);
  std::vector<T> out(outer * inner, T(0));
  const auto& xv = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t e = 0; e < extent; ++e)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * extent + e) * inner + i];
  Shape shape = x.shape();
  if (keepdim)
    shape[axis] = 1;
  else
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  auto xn = x.node_ptr();
  return detail::make_result<T>("sum_axis", std::move(shape), std::move(out), {xn},
                                [xn, outer, extent, inner](Node<T>& n) {
                                  auto& g = xn->ensure_grad();
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t e = 0; e < extent; ++e)
                                      for (std::size_t i = 0; i < inner; ++i)
                                        g[(o * extent + e) * inner + i] += n.grad[o * inner + i];
                                });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw DimensionError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  auto xn = x.node_ptr();
  return detail::make_result<T>("reshape", std::move(shape), x.values(), {xn}, [xn](Node<T>& n) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

/// General axis permutation: out.shape[i] = x.shape[perm[i]].
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw DimensionError("permutation rank mismatch");
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.shape()[i];
  Shape out_shape(r);
  std::vector<std::size_t> src_stride(r);
  std::vector<bool> used(r, false);
  for (std::size_t i = 0; i < r; ++i) {
    if (perm[i] >= r || used[perm[i]]) throw DimensionError("invalid permutation");
    used[perm[i]] = true;
    out_shape[i] = x.shape()[perm[i]];
    src_stride[i] = in_stride[perm[i]];
  }
  // index map out -> in
  const std::size_t total = x.numel();
  std::vector<std::size_t> map(total);
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < total; ++o) {
      map[o] = src;
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        src += src_stride[d];
        if (idx[d] < out_shape[d]) break;
        src -= src_stride[d] * idx[d];
        idx[d] = 0;
      }
    }
  }
  std::vector<T> out(total);
  const auto& xv = x.values();
  for (std::size_t o = 0; o < total; ++o) out[o] = xv[map[o]];
  auto xn = x.node_ptr();
  return detail::make_result<T>("permute", std::move(out_shape), std::move(out), {xn},
                                [xn, map = std::move(map)](Node<T>& n) {
                                  auto& g = xn->ensure_grad();
                                  for (std::size_t o = 0; o < map.size(); ++o) g[map[o]] += n.grad[o];
                                });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::ptrdiff_t axis_in) {
  if (parts.empty()) throw DimensionError("concat of nothing");
  const std::size_t axis = detail::normalize_axis(axis_in, parts[0].rank());
  Shape shape = parts[0].shape();
  std::size_t total_extent = 0;
  for (const auto& p : parts) {
    if (p.rank() != shape.size()) throw DimensionError("concat rank mismatch");
    for (std::size_t d = 0; d < shape.size(); ++d)
      if (d != axis && p.shape()[d] != shape[d])
        throw DimensionError("concat extent mismatch: " + to_string(p.shape()) + " vs " +
                             to_string(shape));
    total_extent += p.shape()[axis];
  }
  shape[axis] = total_extent;
  std::size_t outer, extent, inner;
  detail::split_axis(shape, axis, outer, extent, inner);
  std::vector<T> out(numel_of(shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t pe = p.shape()[axis];
    const auto& pv = p.values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * pe * inner), pe * inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * extent + off) * inner));
    off += pe;
  }
  std::vector<std::shared_ptr<Node<T>>> parents;
  for (const auto& p : parts) parents.push_back(p.node_ptr());
  auto ps = parents;
  return detail::make_result<T>("concat", std::move(shape), std::move(out), std::move(parents),
                                [ps, offsets, axis, outer, extent, inner](Node<T>& n) {
                                  for (std::size_t k = 0; k < ps.size(); ++k) {
                                    if (!ps[k]->requires_grad) continue;
                                    auto& g = ps[k]->ensure_grad();
                                    const std::size_t pe = ps[k]->shape[axis];
                                    for (std::size_t o = 0; o < outer; ++o)
                                      for (std::size_t i = 0; i < pe * inner; ++i)
                                        g[o * pe * inner + i] +=
                                            n.grad[(o * extent + offsets[k]) * inner + i];
                                  }
                                });
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, std::ptrdiff_t axis_in, std::size_t start, std::size_t length) {
  const std::size_t axis = detail::normalize_axis(axis_in, x.rank());
  if (start + length > x.shape()[axis]) throw DimensionError("slice out of range");
  std::size_t outer, extent, inner;
  detail::split_axis(x.shape(), axis, outer, extent, inner);
  Shape shape = x.shape();
  shape[axis] = length;
  std::vector<T> out(numel_of(shape));
  const auto& xv = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * extent + start) * inner),
                length * inner, out.begin() + static_cast<std::ptrdiff_t>(o * length * inner));
  auto xn = x.node_ptr();
  return detail::make_result<T>("slice", std::move(shape), std::move(out), {xn},
                                [xn, outer, extent, inner, start, length](Node<T>& n) {
                                  auto& g = xn->ensure_grad();
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t i = 0; i < length * inner; ++i)
                                      g[(o * extent + start) * inner + i] += n.grad[o * length * inner + i];
                                });
}

/// Rows of `table` [V, C] selected by id; result [ids.size(), C].
template <class T>
Tensor<T> take_rows(const Tensor<T>& table, const std::vector<std::size_t>& ids) {
  if (table.rank() != 2) throw DimensionError("take_rows expects a 2-d table");
  const std::size_t c = table.dim(1);
  std::vector<T> out(ids.size() * c);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= table.dim(0)) throw LookupError("row id " + std::to_string(ids[r]) + " out of table");
    std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(ids[r] * c), c,
                out.begin() + static_cast<std::ptrdiff_t>(r * c));
  }
  auto tn = table.node_ptr();
  return detail::make_result<T>("take_rows", {ids.size(), c}, std::move(out), {tn},
                                [tn, ids, c](Node<T>& n) {
                                  auto& g = tn->ensure_grad();
                                  for (std::size_t r = 0; r < ids.size(); ++r)
                                    for (std::size_t j = 0; j < c; ++j) g[ids[r] * c + j] += n.grad[r * c + j];
                                });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Matrix product. Supports [M,K]x[K,N], batched [B,M,K]x[B,K,N], and
/// [...,K]x[K,N] with the leading axes of `a` flattened.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  if (a.rank() < 2 || b.rank() < 2) throw DimensionError("matmul needs rank >= 2");
  std::size_t batch = 1, m, k, n;
  bool batched = false;
  Shape out_shape;
  if (b.rank() == 2) {
    k = a.shape().back();
    m = a.numel() / std::max<std::size_t>(k, 1);
    const std::size_t bk = transpose_b ? b.dim(1) : b.dim(0);
    n = transpose_b ? b.dim(0) : b.dim(1);
    if (bk != k)
      throw DimensionError("matmul inner extents differ: " + to_string(a.shape()) + " x " +
                           to_string(b.shape()));
    out_shape = a.shape();
    out_shape.back() = n;
  } else {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
      throw DimensionError("batched matmul expects [B,M,K]x[B,K,N], got " + to_string(a.shape()) +
                           " x " + to_string(b.shape()));
    batched = true;
    batch = a.dim(0);
    m = a.dim(1);
    k = a.dim(2);
    const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
    n = transpose_b ? b.dim(1) : b.dim(2);
    if (bk != k)
      throw DimensionError("matmul inner extents differ: " + to_string(a.shape()) + " x " +
                           to_string(b.shape()));
    out_shape = {batch, m, n};
  }
  std::vector<T> out(batch * m * n);
  const std::size_t bstride = batched ? k * n : 0;
  for (std::size_t i = 0; i < batch; ++i)
    detail::gemm<T>(false, transpose_b, m, n, k, a.values().data() + i * m * k,
                    b.values().data() + i * bstride, out.data() + i * m * n, false);
  auto an = a.node_ptr(), bn = b.node_ptr();
  return detail::make_result<T>(
      "matmul", std::move(out_shape), std::move(out), {an, bn},
      [an, bn, batch, m, n, k, bstride, transpose_b](Node<T>& node) {
        for (std::size_t i = 0; i < batch; ++i) {
          const T* g = node.grad.data() + i * m * n;
          if (an->requires_grad)
            detail::gemm<T>(false, !transpose_b, m, k, n, g, bn->value.data() + i * bstride,
                            an->ensure_grad().data() + i * m * k, true);
          if (bn->requires_grad) {
            if (transpose_b)
              detail::gemm<T>(true, false, n, k, m, g, an->value.data() + i * m * k,
                              bn->ensure_grad().data() + i * bstride, true);
            else
              detail::gemm<T>(true, false, k, n, m, an->value.data() + i * m * k, g,
                              bn->ensure_grad().data() + i * bstride, true);
          }
        }
      });
}

/// x[..., K] * W[K, N] + bias[N].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  Tensor<T> y = matmul(x, weight);
  if (!bias.defined()) return y;
  return add(y, bias);
}

// ---------------------------------------------------------------------------
// Normalization and softmax

template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::ptrdiff_t axis_in = -1) {
  const std::size_t axis = detail::normalize_axis(axis_in, x.rank());
  std::size_t outer, extent, inner;
  detail::split_axis(x.shape(), axis, outer, extent, inner);
  if (extent == 0) throw DimensionError("softmax over an empty axis");
  std::vector<T> out(x.numel());
  const auto& xv = x.values();
  if (inner == 1) {
    std::copy(xv.begin(), xv.end(), out.begin());
    detail::AlignedArray<T> scratch;
    for (std::size_t o = 0; o < outer; ++o) detail::softmax_row(out.data() + o * extent, extent, T(1), scratch);
  } else {
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * extent * inner + i;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t e = 0; e < extent; ++e) mx = std::max(mx, xv[base + e * inner]);
        T s = 0;
        for (std::size_t e = 0; e < extent; ++e) {
          const T v = std::exp(xv[base + e * inner] - mx);
          out[base + e * inner] = v;
          s += v;
        }
        for (std::size_t e = 0; e < extent; ++e) out[base + e * inner] /= s;
      }
  }
  auto xn = x.node_ptr();
  return detail::make_result<T>("softmax", x.shape(), std::move(out), {xn},
                                [xn, outer, extent, inner](Node<T>& n) {
                                  auto& g = xn->ensure_grad();
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t i = 0; i < inner; ++i) {
                                      const std::size_t base = o * extent * inner + i;
                                      T dot = 0;
                                      for (std::size_t e = 0; e < extent; ++e)
                                        dot += n.grad[base + e * inner] * n.value[base + e * inner];
                                      for (std::size_t e = 0; e < extent; ++e) {
                                        const std::size_t j = base + e * inner;
                                        g[j] += n.value[j] * (n.grad[j] - dot);
                                      }
                                    }
                                });
}

/// softmax(q k^T / sqrt(D)) v for q [B,Nq,D], k [B,Nk,D], v [B,Nk,Dv], as a single node.
template <class T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) throw DimensionError("attention expects rank-3 q, k, v");
  if (q.dim(2) != k.dim(2) || k.dim(1) != v.dim(1) || q.dim(0) != k.dim(0) || k.dim(0) != v.dim(0))
    throw DimensionError("attention operand shapes disagree: q " + to_string(q.shape()) + ", k " + to_string(k.shape()) +
                         ", v " + to_string(v.shape()));
  const std::size_t b = q.dim(0), nq = q.dim(1), d = q.dim(2), nk = k.dim(1), dv = v.dim(2);
  if (nk == 0) throw DimensionError("attention over an empty key set");
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  auto probs = std::make_shared<std::vector<T>>(b * nq * nk);
  std::vector<T> out(b * nq * dv);
  detail::AlignedArray<T> scratch;
  for (std::size_t i = 0; i < b; ++i) {
    T* p = probs->data() + i * nq * nk;
    detail::gemm<T>(false, true, nq, nk, d, q.values().data() + i * nq * d, k.values().data() + i * nk * d, p, false);
    for (std::size_t r = 0; r < nq; ++r) detail::softmax_row(p + r * nk, nk, scale, scratch);
    detail::gemm<T>(false, false, nq, dv, nk, p, v.values().data() + i * nk * dv, out.data() + i * nq * dv, false);
  }
  auto qn = q.node_ptr(), kn = k.node_ptr(), vn = v.node_ptr();
  return detail::make_result<T>(
      "attention", {b, nq, dv}, std::move(out), {qn, kn, vn}, [qn, kn, vn, probs, b, nq, d, nk, dv, scale](Node<T>& n) {
        std::vector<T> ds(nq * nk);
        for (std::size_t i = 0; i < b; ++i) {
          const T* p = probs->data() + i * nq * nk;
          const T* go = n.grad.data() + i * nq * dv;
          if (vn->requires_grad) detail::gemm<T>(true, false, nk, dv, nq, p, go, vn->ensure_grad().data() + i * nk * dv, true);
          if (!qn->requires_grad && !kn->requires_grad) continue;
          detail::gemm<T>(false, true, nq, nk, dv, go, vn->value.data() + i * nk * dv, ds.data(), false);
          for (std::size_t r = 0; r < nq; ++r) {
            T* dr = ds.data() + r * nk;
            const T* pr = p + r * nk;
            T dot = 0;
            for (std::size_t j = 0; j < nk; ++j) dot += dr[j] * pr[j];
            for (std::size_t j = 0; j < nk; ++j) dr[j] = pr[j] * (dr[j] - dot) * scale;
          }
          if (qn->requires_grad)
            detail::gemm<T>(false, false, nq, d, nk, ds.data(), kn->value.data() + i * nk * d, qn->ensure_grad().data() + i * nq * d, true);
          if (kn->requires_grad)
            detail::gemm<T>(true, false, nk, d, nq, ds.data(), qn->value.data() + i * nq * d, kn->ensure_grad().data() + i * nk * d, true);
        }
      });
}

namespace detail {

/// Normalizes `count` groups of `size` contiguous-by-index elements. `index(gr, j)`
/// gives the flat offset of element j of group gr; `channel(gr, j)` selects the
/// affine parameter slot.
template <class T, class Index, class Channel>
Tensor<T> normalize_groups(const char* name, const Tensor<T>& x, const Tensor<T>& gamma,
                           const Tensor<T>& beta, T eps, std::size_t count, std::size_t size,
                           Index index, Channel channel) {
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(count);
  const auto& xv = x.values();
  const T* gv = gamma.defined() ? gamma.values().data() : nullptr;
  const T* bv = beta.defined() ? beta.values().data() : nullptr;
  for (std::size_t gr = 0; gr < count; ++gr) {
    T mu = 0;
    for (std::size_t j = 0; j < size; ++j) mu += xv[index(gr, j)];
    mu /= static_cast<T>(size);
    T var = 0;
    for (std::size_t j = 0; j < size; ++j) {
      const T d = xv[index(gr, j)] - mu;
      var += d * d;
    }
    var /= static_cast<T>(size);
    rstd[gr] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < size; ++j) {
      const std::size_t at = index(gr, j);
      xhat[at] = (xv[at] - mu) * rstd[gr];
      const std::size_t c = channel(gr, j);
      out[at] = xhat[at] * (gv ? gv[c] : T(1)) + (bv ? bv[c] : T(0));
    }
  }
  auto xn = x.node_ptr();
  auto gn = gamma.defined() ? gamma.node_ptr() : nullptr;
  auto bn = beta.defined() ? beta.node_ptr() : nullptr;
  std::vector<std::shared_ptr<Node<T>>> parents{xn};
  if (gn) parents.push_back(gn);
  if (bn) parents.push_back(bn);
  return make_result<T>(
      name, x.shape(), std::move(out), std::move(parents),
      [xn, gn, bn, xhat = std::move(xhat), rstd = std::move(rstd), count, size, index,
       channel](Node<T>& n) {
        const T* gv = gn ? gn->value.data() : nullptr;
        T* ggam = gn && gn->requires_grad ? gn->ensure_grad().data() : nullptr;
        T* gbet = bn && bn->requires_grad ? bn->ensure_grad().data() : nullptr;
        T* gx = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
        for (std::size_t gr = 0; gr < count; ++gr) {
          T mean_d = 0, mean_dx = 0;
          for (std::size_t j = 0; j < size; ++j) {
            const std::size_t at = index(gr, j);
            const std::size_t c = channel(gr, j);
            const T go = n.grad[at];
            if (ggam) ggam[c] += go * xhat[at];
            if (gbet) gbet[c] += go;
            const T d = go * (gv ? gv[c] : T(1));
            mean_d += d;
            mean_dx += d * xhat[at];
          }
          if (!gx) continue;
          mean_d /= static_cast<T>(size);
          mean_dx /= static_cast<T>(size);
          for (std::size_t j = 0; j < size; ++j) {
            const std::size_t at = index(gr, j);
            const T d = n.grad[at] * (gv ? gv[channel(gr, j)] : T(1));
            gx[at] += rstd[gr] * (d - mean_d - xhat[at] * mean_dx);
          }
        }
      });
}

}  // namespace detail

/// Normalizes over the last axis; gamma/beta ([C]) may be undefined tensors.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma = {}, const Tensor<T>& beta = {},
                     T eps = T(1e-5)) {
  if (x.rank() == 0 || x.shape().back() == 0) throw DimensionError("layer_norm on empty last axis");
  const std::size_t c = x.shape().back();
  if ((gamma.defined() && gamma.numel() != c) || (beta.defined() && beta.numel() != c))
    throw DimensionError("layer_norm affine width mismatch");
  return detail::normalize_groups<T>(
      "layer_norm", x, gamma, beta, eps, x.numel() / c, c,
      [c](std::size_t gr, std::size_t j) { return gr * c + j; },
      [](std::size_t, std::size_t j) { return j; });
}

/// Group normalization of x [B, C, H, W] with per-channel affine.
template <class T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  if (x.rank() != 4) throw DimensionError("group_norm expects [B,C,H,W]");
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (groups == 0 || c % groups) throw DimensionError("channels not divisible by groups");
  const std::size_t per = c / groups;
  return detail::normalize_groups<T>(
      "group_norm", x, gamma, beta, eps, b * groups, per * hw,
      [per, hw](std::size_t gr, std::size_t j) { return gr * per * hw + j; },
      [per, hw, groups](std::size_t gr, std::size_t j) { return (gr % groups) * per + j / hw; });
}

namespace detail {

/// Test hook: a constant added to every cross_normalize output. Zero in normal use;
/// the verify suite sets it to check that its invariants catch a faulty kernel.
inline double& cross_normalize_fault() {
  thread_local double offset = 0.0;
  return offset;
}

}  // namespace detail

/// Re-standardizes `h_prime` [B,N,C] to the per-channel token statistics of
/// `h_ref` [B,M,C]: (h' - mean(h'))/std(h') * std(ref) + mean(ref). Standard
/// deviations are population values floored at `eps`.
template <class T>
Tensor<T> cross_normalize(const Tensor<T>& h_prime, const Tensor<T>& h_ref, T eps = T(1e-5)) {
  if (h_prime.rank() != 3 || h_ref.rank() != 3 || h_prime.dim(0) != h_ref.dim(0) ||
      h_prime.dim(2) != h_ref.dim(2))
    throw DimensionError("cross_normalize expects [B,N,C] and [B,M,C], got " +
                         to_string(h_prime.shape()) + " and " + to_string(h_ref.shape()));
  const std::size_t b = h_prime.dim(0), n = h_prime.dim(1), m = h_ref.dim(1), c = h_prime.dim(2);
  if (m == 0 || n == 0) throw DimensionError("cross_normalize on empty token axis");
  auto stats = [c](const std::vector<T>& v, std::size_t bi, std::size_t tokens, std::size_t ch,
                   T& mu, T& sd_raw) {
    mu = 0;
    for (std::size_t t = 0; t < tokens; ++t) mu += v[(bi * tokens + t) * c + ch];
    mu /= static_cast<T>(tokens);
    T var = 0;
    for (std::size_t t = 0; t < tokens; ++t) {
      const T d = v[(bi * tokens + t) * c + ch] - mu;
      var += d * d;
    }
    sd_raw = std::sqrt(var / static_cast<T>(tokens));
  };
  std::vector<T> mu_p(b * c), sd_p(b * c), mu_r(b * c), sd_r(b * c);
  std::vector<T> out(h_prime.numel());
  const T fault = static_cast<T>(detail::cross_normalize_fault());
  const auto& pv = h_prime.values();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t s = bi * c + ch;
      stats(pv, bi, n, ch, mu_p[s], sd_p[s]);
      stats(h_ref.values(), bi, m, ch, mu_r[s], sd_r[s]);
      const T sp = std::max(sd_p[s], eps), sr = std::max(sd_r[s], eps);
      for (std::size_t t = 0; t < n; ++t) {
        const std::size_t at = (bi * n + t) * c + ch;
        out[at] = (pv[at] - mu_p[s]) / sp * sr + mu_r[s] + fault;
      }
    }
  auto pn = h_prime.node_ptr(), rn = h_ref.node_ptr();
  return detail::make_result<T>(
      "cross_normalize", h_prime.shape(), std::move(out), {pn, rn},
      [pn, rn, b, n, m, c, eps, mu_p, sd_p, mu_r, sd_r](Node<T>& node) {
        const auto& pv = pn->value;
        const auto& rv = rn->value;
        T* gp = pn->requires_grad ? pn->ensure_grad().data() : nullptr;
        T* gr = rn->requires_grad ? rn->ensure_grad().data() : nullptr;
        for (std::size_t bi = 0; bi < b; ++bi)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t s = bi * c + ch;
            const bool p_floored = sd_p[s] <= eps, r_floored = sd_r[s] <= eps;
            const T sp = std::max(sd_p[s], eps), sr = std::max(sd_r[s], eps);
            T sum_g = 0, sum_gx = 0;
            for (std::size_t t = 0; t < n; ++t) {
              const std::size_t at = (bi * n + t) * c + ch;
              const T xhat = (pv[at] - mu_p[s]) / sp;
              sum_g += node.grad[at];
              sum_gx += node.grad[at] * xhat;
            }
            if (gp) {
              const T mean_g = sum_g / static_cast<T>(n);
              const T mean_gx = p_floored ? T(0) : sum_gx / static_cast<T>(n);
              for (std::size_t t = 0; t < n; ++t) {
                const std::size_t at = (bi * n + t) * c + ch;
                const T xhat = (pv[at] - mu_p[s]) / sp;
                gp[at] += sr / sp * (node.grad[at] - mean_g - xhat * mean_gx);
              }
            }
            if (gr) {
              // d out / d mu_ref = 1, d out / d sd_ref = xhat
              for (std::size_t t = 0; t < m; ++t) {
                const std::size_t at = (bi * m + t) * c + ch;
                T g = sum_g / static_cast<T>(m);
                if (!r_floored) g += sum_gx * (rv[at] - mu_r[s]) / (static_cast<T>(m) * sd_r[s]);
                gr[at] += g;
              }
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Convolution and resampling

namespace detail {

struct ConvGeometry {
  std::size_t batch, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
};

template <class T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t plane = g.ho * g.wo;
  const auto pad = static_cast<std::ptrdiff_t>(g.pad), stride = static_cast<std::ptrdiff_t>(g.stride);
  const auto h = static_cast<std::ptrdiff_t>(g.h), w = static_cast<std::ptrdiff_t>(g.w), wo = static_cast<std::ptrdiff_t>(g.wo);
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((c * g.kh + ky) * g.kw + kx) * plane;
        const auto off = static_cast<std::ptrdiff_t>(kx) - pad;
        // output columns whose input column lies inside [0, w)
        const std::ptrdiff_t lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
        const std::ptrdiff_t hi = std::clamp<std::ptrdiff_t>((w - off + stride - 1) / stride, lo, wo);
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          T* dst = row + oy * g.wo;
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * stride + static_cast<std::ptrdiff_t>(ky) - pad;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::ptrdiff_t>(c) * h + iy) * w + off;
          std::fill(dst, dst + lo, T(0));
          if (stride == 1) std::copy(src + lo, src + hi, dst + lo);
          else
            for (std::ptrdiff_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * stride];
          std::fill(dst + hi, dst + wo, T(0));
        }
      }
}

template <class T>
void col2im(const T* col, const ConvGeometry& g, T* x) {
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((c * g.kh + ky) * g.kw + kx) * plane;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            x[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] += row[oy * g.wo + ox];
          }
        }
      }
}

}  // namespace detail

/// Cross-correlation of x [B,Cin,H,W] with kernel [Cout,Cin,kh,kw] (+ bias [Cout]).
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias = {},
                 std::size_t stride = 1, std::size_t padding = 0) {
  if (x.rank() != 4 || kernel.rank() != 4)
    throw DimensionError("conv2d expects [B,C,H,W] input and [Co,Ci,kh,kw] kernel");
  if (x.dim(1) != kernel.dim(1))
    throw DimensionError("conv2d channel mismatch: input " + to_string(x.shape()) + ", kernel " +
                         to_string(kernel.shape()));
  if (stride == 0) throw DimensionError("conv2d stride must be positive");
  detail::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), kernel.dim(0), kernel.dim(2),
                         kernel.dim(3), stride, padding, 0, 0};
  if (g.h + 2 * padding < g.kh || g.w + 2 * padding < g.kw)
    throw DimensionError("conv2d kernel larger than padded input");
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;
  if (bias.defined() && bias.numel() != g.cout) throw DimensionError("conv2d bias width mismatch");
  const std::size_t plane = g.ho * g.wo, patch = g.cin * g.kh * g.kw;
  const bool direct = g.kh == 1 && g.kw == 1 && stride == 1 && padding == 0;
  std::vector<T> out(g.batch * g.cout * plane);
  std::vector<T> col(direct ? 0 : patch * plane);
  for (std::size_t b = 0; b < g.batch; ++b) {
    const T* xb = x.values().data() + b * g.cin * g.h * g.w;
    const T* cb = xb;
    if (!direct) {
      detail::im2col(xb, g, col.data());
      cb = col.data();
    }
    T* ob = out.data() + b * g.cout * plane;
    detail::gemm<T>(false, false, g.cout, plane, patch, kernel.values().data(), cb, ob, false);
    if (bias.defined())
      for (std::size_t co = 0; co < g.cout; ++co)
        for (std::size_t p = 0; p < plane; ++p) ob[co * plane + p] += bias.values()[co];
  }
  auto xn = x.node_ptr(), kn = kernel.node_ptr();
  auto bn = bias.defined() ? bias.node_ptr() : nullptr;
  std::vector<std::shared_ptr<Node<T>>> parents{xn, kn};
  if (bn) parents.push_back(bn);
  return detail::make_result<T>(
      "conv2d", {g.batch, g.cout, g.ho, g.wo}, std::move(out), std::move(parents),
      [xn, kn, bn, g, direct, plane, patch](Node<T>& n) {
        std::vector<T> col(direct ? 0 : patch * plane), dcol(direct ? 0 : patch * plane);
        T* gk = kn->requires_grad ? kn->ensure_grad().data() : nullptr;
        T* gx = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
        T* gb = bn && bn->requires_grad ? bn->ensure_grad().data() : nullptr;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const T* go = n.grad.data() + b * g.cout * plane;
          if (gb)
            for (std::size_t co = 0; co < g.cout; ++co)
              for (std::size_t p = 0; p < plane; ++p) gb[co] += go[co * plane + p];
          const T* xb = xn->value.data() + b * g.cin * g.h * g.w;
          if (gk) {
            const T* cb = xb;
            if (!direct) {
              detail::im2col(xb, g, col.data());
              cb = col.data();
            }
            detail::gemm<T>(false, true, g.cout, patch, plane, go, cb, gk, true);
          }
          if (gx) {
            T* gxb = gx + b * g.cin * g.h * g.w;
            if (direct) {
              detail::gemm<T>(true, false, patch, plane, g.cout, kn->value.data(), go, gxb, true);
            } else {
              detail::gemm<T>(true, false, patch, plane, g.cout, kn->value.data(), go, dcol.data(), false);
              detail::col2im(dcol.data(), g, gxb);
            }
          }
        }
      });
}

/// Nearest-neighbour 2x upsampling of [B,C,H,W].
template <class T>
Tensor<T> upsample2x(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("upsample2x expects [B,C,H,W]");
  const std::size_t bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<T> out(bc * 4 * h * w);
  const auto& xv = x.values();
  for (std::size_t p = 0; p < bc; ++p)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx)
        out[(p * 2 * h + y) * 2 * w + xx] = xv[(p * h + y / 2) * w + xx / 2];
  auto xn = x.node_ptr();
  return detail::make_result<T>("upsample2x", {x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out),
                                {xn}, [xn, bc, h, w](Node<T>& n) {
                                  auto& g = xn->ensure_grad();
                                  for (std::size_t p = 0; p < bc; ++p)
                                    for (std::size_t y = 0; y < 2 * h; ++y)
                                      for (std::size_t xx = 0; xx < 2 * w; ++xx)
                                        g[(p * h + y / 2) * w + xx / 2] += n.grad[(p * 2 * h + y) * 2 * w + xx];
                                });
}

/// Average pooling of [B,C,H,W] by an integer factor.
template <class T>
Tensor<T> avg_pool(const Tensor<T>& x, std::size_t factor) {
  if (x.rank() != 4 || factor == 0 || x.dim(2) % factor || x.dim(3) % factor)
    throw DimensionError("avg_pool needs [B,C,H,W] divisible by the factor");
  const std::size_t bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = h / factor, wo = w / factor;
  const T inv = T(1) / static_cast<T>(factor * factor);
  std::vector<T> out(bc * ho * wo, T(0));
  const auto& xv = x.values();
  for (std::size_t p = 0; p < bc; ++p)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx)
        out[(p * ho + y / factor) * wo + xx / factor] += xv[(p * h + y) * w + xx] * inv;
  auto xn = x.node_ptr();
  return detail::make_result<T>("avg_pool", {x.dim(0), x.dim(1), ho, wo}, std::move(out), {xn},
                                [xn, bc, h, w, ho, wo, factor, inv](Node<T>& n) {
                                  auto& g = xn->ensure_grad();
                                  for (std::size_t p = 0; p < bc; ++p)
                                    for (std::size_t y = 0; y < h; ++y)
                                      for (std::size_t xx = 0; xx < w; ++xx)
                                        g[(p * h + y) * w + xx] += n.grad[(p * ho + y / factor) * wo + xx / factor] * inv;
                                });
}

// ---------------------------------------------------------------------------
// Rotary embedding primitive

/// Rotates interleaved channel pairs (2p, 2p+1) of x [..., N, D] by per-token
/// angles: cos/sin hold [N, D/2] entries. Backward applies the inverse rotation.
template <class T>
Tensor<T> rotate_pairs(const Tensor<T>& x, std::vector<T> cos_table, std::vector<T> sin_table) {
  if (x.rank() < 2) throw DimensionError("rotate_pairs expects [..., N, D]");
  const std::size_t n = x.dim(-2), d = x.dim(-1);
  if (d % 2) throw ConfigError("rotary width must be even, got " + std::to_string(d));
  if (cos_table.size() != n * d / 2 || sin_table.size() != n * d / 2)
    throw DimensionError("rotary table does not match token count");
  const std::size_t rows = x.numel() / std::max<std::size_t>(n * d, 1);
  std::vector<T> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t p = 0; p < d / 2; ++p) {
        const std::size_t at = (r * n + t) * d + 2 * p;
        const T c = cos_table[t * d / 2 + p], s = sin_table[t * d / 2 + p];
        out[at] = xv[at] * c - xv[at + 1] * s;
        out[at + 1] = xv[at] * s + xv[at + 1] * c;
      }
  auto xn = x.node_ptr();
  return detail::make_result<T>(
      "rotate_pairs", x.shape(), std::move(out), {xn},
      [xn, rows, n, d, cos_table = std::move(cos_table), sin_table = std::move(sin_table)](Node<T>& node) {
        auto& g = xn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t t = 0; t < n; ++t)
            for (std::size_t p = 0; p < d / 2; ++p) {
              const std::size_t at = (r * n + t) * d + 2 * p;
              const T c = cos_table[t * d / 2 + p], s = sin_table[t * d / 2 + p];
              g[at] += node.grad[at] * c + node.grad[at + 1] * s;
              g[at + 1] += -node.grad[at] * s + node.grad[at + 1] * c;
            }
      });
}

}  // namespace dcctl
