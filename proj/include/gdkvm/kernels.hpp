#pragma once

#include <cstddef>

// Inner-loop kernels. Each has a scalar reference implementation and, on
// x86-64, an AVX2/FMA variant. The variant is chosen once at startup from
// CPUID; setting GDKVM_SIMD=scalar forces the reference path.
namespace gdkvm::kernels {

template <typename T>
struct KernelTable {
  const char* name;
  // sum_i a[i] * b[i]
  T (*dot)(const T* a, const T* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(T alpha, const T* x, T* y, std::size_t n);
  // C[m x n] = A[m x k] * B[k x n]   (C += ... when accumulate)
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate);
  // C[m x n] = A[m x k] * B[n x k]^T
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate);
  // C[m x n] = A[k x m]^T * B[k x n]
  void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate);
  // S[rows x cols] = alpha * (S - a k^T) + b k^T, the shared form of every
  // memory-state update rule.
  void (*decay_rank2)(T* s, std::size_t rows, std::size_t cols, T alpha, const T* a, const T* b, const T* k);
};

template <typename T>
const KernelTable<T>& scalar();

// nullptr when the CPU or the build lacks AVX2+FMA.
template <typename T>
const KernelTable<T>* avx2();

// The table selected for this process.
template <typename T>
const KernelTable<T>& active();

namespace detail {
template <typename T>
const KernelTable<T>* avx2_table();
}  // namespace detail

}  // namespace gdkvm::kernels
