// SPDX-License-Identifier: Apache-2.0
//
// Dense kernels shared by the op implementations. Loop orders are fixed, so
// every result is bit-reproducible.
#pragma once

#include <cstddef>

namespace qsat::kernels {

namespace detail {

// C[m x n] (+)= A . B where A(i, p) = a[i * si + p * sp]. Four rows of C are
// updated per pass over B. Every C element accumulates over p in ascending
// order regardless of blocking.
inline void gemm_strided(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t si,
                         std::size_t sp, const double* b, double* c, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < m * n; ++i) c[i] = 0.0;
  }
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    double* c0 = c + i * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    for (std::size_t p = 0; p < k; ++p) {
      const double a0 = a[i * si + p * sp], a1 = a[(i + 1) * si + p * sp];
      const double a2 = a[(i + 2) * si + p * sp], a3 = a[(i + 3) * si + p * sp];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double bv = brow[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * si + p * sp];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// C[m x n] (+)= A[m x k] . B[k x n]
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a,
                    const double* b, double* c, bool accumulate) {
  detail::gemm_strided(m, n, k, a, k, 1, b, c, accumulate);
}

// C[m x n] (+)= A^T . B with A stored [k x m], B [k x n]
inline void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a,
                    const double* b, double* c, bool accumulate) {
  detail::gemm_strided(m, n, k, a, 1, m, b, c, accumulate);
}

// C[m x n] (+)= A . B^T with A [m x k], B stored [n x k]
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a,
                    const double* b, double* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

}  // namespace qsat::kernels
