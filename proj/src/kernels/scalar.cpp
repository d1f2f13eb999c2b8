#include "gdkvm/kernels.hpp"

namespace gdkvm::kernels {
namespace {

template <typename T>
T dot_ref(const T* a, const T* b, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
void axpy_ref(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void gemm_nn_ref(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
    }
  }
}

template <typename T>
void gemm_nt_ref(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
      c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
    }
  }
}

template <typename T>
void gemm_tn_ref(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * b[p * n + j];
      c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
    }
  }
}

template <typename T>
void decay_rank2_ref(T* s, std::size_t rows, std::size_t cols, T alpha, const T* a, const T* b, const T* k) {
  for (std::size_t i = 0; i < rows; ++i) {
    T* row = s + i * cols;
    for (std::size_t j = 0; j < cols; ++j) row[j] = alpha * (row[j] - a[i] * k[j]) + b[i] * k[j];
  }
}

template <typename T>
constexpr KernelTable<T> kScalarTable = {
    "scalar", &dot_ref<T>, &axpy_ref<T>, &gemm_nn_ref<T>, &gemm_nt_ref<T>, &gemm_tn_ref<T>, &decay_rank2_ref<T>,
};

}  // namespace

template <typename T>
const KernelTable<T>& scalar() {
  return kScalarTable<T>;
}

template const KernelTable<float>& scalar<float>();
template const KernelTable<double>& scalar<double>();

}  // namespace gdkvm::kernels
