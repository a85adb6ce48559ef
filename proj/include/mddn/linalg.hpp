#pragma once

#include <cstddef>

namespace mddn::linalg {

// Row-major GEMM kernels. When accumulate is false C is overwritten.

// C[M,N] (+)= A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate);

// C[M,N] (+)= A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate);

// C[M,N] (+)= A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate);

// out[cols, rows] = in[rows, cols]^T
template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* in, T* out);

// Caps the BLAS worker pool.
void set_threads(int n);

}  // namespace mddn::linalg
