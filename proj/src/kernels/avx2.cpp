#include <immintrin.h>

#include <vector>

#include "gdkvm/kernels.hpp"

namespace gdkvm::kernels {
namespace {

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 sh = _mm_movehdup_ps(lo);
  __m128 s = _mm_add_ps(lo, sh);
  sh = _mm_movehl_ps(sh, s);
  s = _mm_add_ss(s, sh);
  return _mm_cvtss_f32(s);
}

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d h = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, h));
}

float dot_f32(const float* a, const float* b, std::size_t n) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8), acc1);
  }
  for (; i + 8 <= n; i += 8) acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
  float acc = hsum(_mm256_add_ps(acc0, acc1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

double dot_f64(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void axpy_f32(float alpha, const float* x, float* y, std::size_t n) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void axpy_f64(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
struct Vec;
template <>
struct Vec<float> {
  using V = __m256;
  static constexpr std::size_t width = 8;
  static V zero() { return _mm256_setzero_ps(); }
  static V load(const float* p) { return _mm256_loadu_ps(p); }
  static void store(float* p, V v) { _mm256_storeu_ps(p, v); }
  static V set1(float x) { return _mm256_set1_ps(x); }
  static V fma(V a, V b, V c) { return _mm256_fmadd_ps(a, b, c); }
  static V add(V a, V b) { return _mm256_add_ps(a, b); }
  static constexpr auto dot = dot_f32;
  static constexpr auto axpy = axpy_f32;
};
template <>
struct Vec<double> {
  using V = __m256d;
  static constexpr std::size_t width = 4;
  static V zero() { return _mm256_setzero_pd(); }
  static V load(const double* p) { return _mm256_loadu_pd(p); }
  static void store(double* p, V v) { _mm256_storeu_pd(p, v); }
  static V set1(double x) { return _mm256_set1_pd(x); }
  static V fma(V a, V b, V c) { return _mm256_fmadd_pd(a, b, c); }
  static V add(V a, V b) { return _mm256_add_pd(a, b); }
  static constexpr auto dot = dot_f64;
  static constexpr auto axpy = axpy_f64;
};

// R rows x 2 vectors of C, accumulated over the full depth k. A is read with
// row stride lda and depth stride 1 (or transposed: row stride 1, depth
// stride lda).
template <typename T, std::size_t R, bool TransA>
inline void micro_2v(std::size_t k, const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc) {
  using W = Vec<T>;
  typename W::V acc0[R], acc1[R];
  for (std::size_t r = 0; r < R; ++r) {
    acc0[r] = W::load(c + r * ldc);
    acc1[r] = W::load(c + r * ldc + W::width);
  }
  for (std::size_t p = 0; p < k; ++p) {
    const auto b0 = W::load(b + p * ldb);
    const auto b1 = W::load(b + p * ldb + W::width);
    for (std::size_t r = 0; r < R; ++r) {
      const auto av = W::set1(TransA ? a[p * lda + r] : a[r * lda + p]);
      acc0[r] = W::fma(av, b0, acc0[r]);
      acc1[r] = W::fma(av, b1, acc1[r]);
    }
  }
  for (std::size_t r = 0; r < R; ++r) {
    W::store(c + r * ldc, acc0[r]);
    W::store(c + r * ldc + W::width, acc1[r]);
  }
}

template <typename T, std::size_t R, bool TransA>
inline void micro_1v(std::size_t k, const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc) {
  using W = Vec<T>;
  typename W::V acc[R];
  for (std::size_t r = 0; r < R; ++r) acc[r] = W::load(c + r * ldc);
  for (std::size_t p = 0; p < k; ++p) {
    const auto b0 = W::load(b + p * ldb);
    for (std::size_t r = 0; r < R; ++r) acc[r] = W::fma(W::set1(TransA ? a[p * lda + r] : a[r * lda + p]), b0, acc[r]);
  }
  for (std::size_t r = 0; r < R; ++r) W::store(c + r * ldc, acc[r]);
}

template <typename T, std::size_t R, bool TransA>
void row_block(std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b, T* c) {
  constexpr std::size_t w = Vec<T>::width;
  std::size_t j = 0;
  for (; j + 2 * w <= n; j += 2 * w) micro_2v<T, R, TransA>(k, a, lda, b + j, n, c + j, n);
  for (; j + w <= n; j += w) micro_1v<T, R, TransA>(k, a, lda, b + j, n, c + j, n);
  for (; j < n; ++j) {
    for (std::size_t r = 0; r < R; ++r) {
      T acc = c[r * n + j];
      for (std::size_t p = 0; p < k; ++p) acc += (TransA ? a[p * lda + r] : a[r * lda + p]) * b[p * n + j];
      c[r * n + j] = acc;
    }
  }
}

// C[m x n] += op(A) * B with B[k x n] row-major; op(A) is A[m x k] or,
// with TransA, A[k x m] transposed.
template <typename T, bool TransA>
void gemm_blocked(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  const std::size_t lda = TransA ? m : k;
  auto row = [&](std::size_t i) { return TransA ? a + i : a + i * lda; };
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) row_block<T, 4, TransA>(n, k, row(i), lda, b, c + i * n);
  for (; i < m; ++i) row_block<T, 1, TransA>(n, k, row(i), lda, b, c + i * n);
}

template <typename T>
void zero_rows(T* c, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) c[i] = 0;
}

template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  if (!accumulate) zero_rows(c, m * n);
  if (n == 1) {
    for (std::size_t i = 0; i < m; ++i) c[i] += Vec<T>::dot(a + i * k, b, k);
    return;
  }
  gemm_blocked<T, false>(m, n, k, a, b, c);
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  if (k >= 32) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const T v = Vec<T>::dot(a + i * k, b + j * k, k);
        c[i * n + j] = accumulate ? c[i * n + j] + v : v;
      }
    }
    return;
  }
  // Short depth: transpose B once and run the blocked kernel.
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  }
  if (!accumulate) zero_rows(c, m * n);
  gemm_blocked<T, false>(m, n, k, a, bt.data(), c);
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  if (!accumulate) zero_rows(c, m * n);
  if (n == 1) {
    for (std::size_t p = 0; p < k; ++p) Vec<T>::axpy(b[p], a + p * m, c, m);
    return;
  }
  gemm_blocked<T, true>(m, n, k, a, b, c);
}

void decay_rank2_f32(float* s, std::size_t rows, std::size_t cols, float alpha, const float* a, const float* b,
                     const float* k) {
  const __m256 valpha = _mm256_set1_ps(alpha);
  for (std::size_t i = 0; i < rows; ++i) {
    float* row = s + i * cols;
    const __m256 va = _mm256_set1_ps(a[i]);
    const __m256 vb = _mm256_set1_ps(b[i]);
    std::size_t j = 0;
    for (; j + 8 <= cols; j += 8) {
      const __m256 vk = _mm256_loadu_ps(k + j);
      const __m256 erased = _mm256_fnmadd_ps(va, vk, _mm256_loadu_ps(row + j));
      _mm256_storeu_ps(row + j, _mm256_fmadd_ps(vb, vk, _mm256_mul_ps(valpha, erased)));
    }
    for (; j < cols; ++j) row[j] = alpha * (row[j] - a[i] * k[j]) + b[i] * k[j];
  }
}

void decay_rank2_f64(double* s, std::size_t rows, std::size_t cols, double alpha, const double* a, const double* b,
                     const double* k) {
  const __m256d valpha = _mm256_set1_pd(alpha);
  for (std::size_t i = 0; i < rows; ++i) {
    double* row = s + i * cols;
    const __m256d va = _mm256_set1_pd(a[i]);
    const __m256d vb = _mm256_set1_pd(b[i]);
    std::size_t j = 0;
    for (; j + 4 <= cols; j += 4) {
      const __m256d vk = _mm256_loadu_pd(k + j);
      const __m256d erased = _mm256_fnmadd_pd(va, vk, _mm256_loadu_pd(row + j));
      _mm256_storeu_pd(row + j, _mm256_fmadd_pd(vb, vk, _mm256_mul_pd(valpha, erased)));
    }
    for (; j < cols; ++j) row[j] = alpha * (row[j] - a[i] * k[j]) + b[i] * k[j];
  }
}

constexpr KernelTable<float> kAvx2F32 = {
    "avx2", &dot_f32, &axpy_f32, &gemm_nn<float>, &gemm_nt<float>, &gemm_tn<float>, &decay_rank2_f32,
};
constexpr KernelTable<double> kAvx2F64 = {
    "avx2", &dot_f64, &axpy_f64, &gemm_nn<double>, &gemm_nt<double>, &gemm_tn<double>, &decay_rank2_f64,
};

}  // namespace

namespace detail {
template <>
const KernelTable<float>* avx2_table<float>() {
  return &kAvx2F32;
}
template <>
const KernelTable<double>* avx2_table<double>() {
  return &kAvx2F64;
}
}  // namespace detail

}  // namespace gdkvm::kernels
