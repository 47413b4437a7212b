#pragma once

// Dense kernels used by the graph ops. Every output element is produced by a
// fixed left-to-right accumulation, so results are bitwise reproducible.

#include <cstddef>
#include <vector>

namespace asp::tensor::kernels {

/// c (n x m) += a (n x k) * b (k x m)
template <class T>
void gemm_nn(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t n,
             std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    T* __restrict crow = c + i * m;
    const T* __restrict arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* __restrict brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

/// c (k x m) += a^T * b, with a (n x k) and b (n x m)
template <class T>
void gemm_tn(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t n,
             std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* __restrict arow = a + i * k;
    const T* __restrict brow = b + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* __restrict crow = c + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

/// c (n x k) += a (n x m) * b^T, with b (k x m)
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t n, std::size_t m, std::size_t k) {
  std::vector<T> bt(m * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < m; ++j) bt[j * k + p] = b[p * m + j];
  gemm_nn(a, bt.data(), c, n, m, k);
}

}  // namespace asp::tensor::kernels
