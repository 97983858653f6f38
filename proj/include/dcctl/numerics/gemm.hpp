#pragma once

#include <algorithm>
#include <cstddef>

#include <Eigen/Core>

namespace dcctl::detail {

template <class T>
using RowMajorMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Always the packed (blocked) kernel. Eigen's small-product and matrix-vector
/// paths peel by buffer address, so their summation order, and hence the last
/// bits, would depend on where the allocator put the operands.
template <class T, int LhsOrder, int RhsOrder>
void packed_gemm(Eigen::Index rows, Eigen::Index cols, Eigen::Index depth, const T* lhs, Eigen::Index lhs_stride, const T* rhs,
                 Eigen::Index rhs_stride, T* res, Eigen::Index res_stride) {
  using Kernel = Eigen::internal::general_matrix_matrix_product<Eigen::Index, T, LhsOrder, false, T, RhsOrder, false, Eigen::ColMajor, 1>;
  Eigen::internal::gemm_blocking_space<Eigen::ColMajor, T, T, Eigen::Dynamic, Eigen::Dynamic, Eigen::Dynamic> blocking(rows, cols, depth, 1,
                                                                                                                     true);
  Kernel::run(rows, cols, depth, lhs, lhs_stride, rhs, rhs_stride, res, 1, res_stride, T(1), blocking, nullptr);
}

/// C[M,N] (+)= op(A) * op(B) on dense row-major buffers; op is an optional transpose.
/// A is stored as [M,K] (or [K,M] when trans_a), B as [K,N] (or [N,K] when trans_b).
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  if (k == 0 || m == 0 || n == 0) return;
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  // Row-major C is column-major C^T = op(B)^T op(A)^T, an [N,M] product.
  constexpr int col = Eigen::ColMajor, row = Eigen::RowMajor;
  if (!trans_b && !trans_a) packed_gemm<T, col, col>(N, M, K, b, N, a, K, c, N);
  if (!trans_b && trans_a) packed_gemm<T, col, row>(N, M, K, b, N, a, M, c, N);
  if (trans_b && !trans_a) packed_gemm<T, row, col>(N, M, K, b, K, a, K, c, N);
  if (trans_b && trans_a) packed_gemm<T, row, row>(N, M, K, b, K, a, M, c, N);
}

}  // namespace dcctl::detail
