#include "mddn/linalg.hpp"

#include <algorithm>

#include <cblas.h>

namespace mddn::linalg {

namespace {

void gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, std::size_t M, std::size_t N, std::size_t K,
          const float* A, std::size_t lda, const float* B, std::size_t ldb, float* C,
          bool accumulate) {
  if (M == 0 || N == 0) return;
  if (K == 0) {
    if (!accumulate) std::fill(C, C + M * N, 0.0f);
    return;
  }
  cblas_sgemm(CblasRowMajor, ta, tb, static_cast<int>(M), static_cast<int>(N),
              static_cast<int>(K), 1.0f, A, static_cast<int>(lda), B, static_cast<int>(ldb),
              accumulate ? 1.0f : 0.0f, C, static_cast<int>(N));
}

void gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, std::size_t M, std::size_t N, std::size_t K,
          const double* A, std::size_t lda, const double* B, std::size_t ldb, double* C,
          bool accumulate) {
  if (M == 0 || N == 0) return;
  if (K == 0) {
    if (!accumulate) std::fill(C, C + M * N, 0.0);
    return;
  }
  cblas_dgemm(CblasRowMajor, ta, tb, static_cast<int>(M), static_cast<int>(N),
              static_cast<int>(K), 1.0, A, static_cast<int>(lda), B, static_cast<int>(ldb),
              accumulate ? 1.0 : 0.0, C, static_cast<int>(N));
}

// Plain loops for types without a BLAS kernel (extended precision).
template <typename T>
void gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, std::size_t M, std::size_t N, std::size_t K,
          const T* A, std::size_t lda, const T* B, std::size_t ldb, T* C, bool accumulate) {
  auto a_at = [&](std::size_t i, std::size_t k) {
    return ta == CblasNoTrans ? A[i * lda + k] : A[k * lda + i];
  };
  for (std::size_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    if (!accumulate) std::fill(c, c + N, T(0));
    if (tb == CblasNoTrans) {
      for (std::size_t k = 0; k < K; ++k) {
        const T a = a_at(i, k);
        const T* b = B + k * ldb;
        for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
      }
    } else {
      for (std::size_t j = 0; j < N; ++j) {
        const T* b = B + j * ldb;
        T s = 0;
        for (std::size_t k = 0; k < K; ++k) s += a_at(i, k) * b[k];
        c[j] += s;
      }
    }
  }
}

}  // namespace

template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate) {
  gemm(CblasNoTrans, CblasNoTrans, M, N, K, A, K, B, N, C, accumulate);
}

template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate) {
  gemm(CblasTrans, CblasNoTrans, M, N, K, A, M, B, N, C, accumulate);
}

template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate) {
  gemm(CblasNoTrans, CblasTrans, M, N, K, A, K, B, K, C, accumulate);
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* in, T* out) {
  constexpr std::size_t blk = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += blk)
    for (std::size_t c0 = 0; c0 < cols; c0 += blk) {
      const std::size_t r1 = std::min(rows, r0 + blk), c1 = std::min(cols, c0 + blk);
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = c0; c < c1; ++c) out[c * rows + r] = in[r * cols + c];
    }
}

void set_threads(int n) { openblas_set_num_threads(std::max(1, n)); }

#define MDDN_INSTANTIATE(T)                                                                  \
  template void gemm_nn<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*,   \
                           bool);                                                            \
  template void gemm_tn<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*,   \
                           bool);                                                            \
  template void gemm_nt<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*,   \
                           bool);                                                            \
  template void transpose<T>(std::size_t, std::size_t, const T*, T*);

MDDN_INSTANTIATE(float)
MDDN_INSTANTIATE(double)
MDDN_INSTANTIATE(long double)

}  // namespace mddn::linalg
