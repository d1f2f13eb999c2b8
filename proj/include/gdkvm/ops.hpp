#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstddef>
#include <vector>

#include "gdkvm/tensor.hpp"

// Primitive numeric operations shared by every higher-level module. All are
// pure functions, instantiated for float (default) and double (verification).
namespace gdkvm {

// a[m x k] * b[k x n]
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Row-wise softmax of a rank-2 tensor, max-shifted.
template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x);

// Logistic function, clamped so the result stays strictly inside (0, 1)
// even where the exact value rounds to 0 or 1.
template <typename T>
inline T sigmoid(T x) {
  constexpr T lo = std::numeric_limits<T>::min();
  constexpr T hi = T{1} - std::numeric_limits<T>::epsilon() / 2;
  T y;
  if (x >= T{0}) {
    y = T{1} / (T{1} + std::exp(-x));
  } else {
    const T e = std::exp(x);
    y = e / (T{1} + e);
  }
  return std::clamp(y, lo, hi);
}

// Positive feature map for linear matching: x + 1 for x >= 0, exp(x) below.
// Continuous with a continuous first derivative at 0. Written without a
// branch (exp(0) == 1 exactly) since keys have random signs.
template <typename T>
inline T phi(T x) {
  return std::exp(std::min(x, T{0})) + std::max(x, T{0});
}

template <typename T>
inline T phi_derivative(T x) {
  return x >= T{0} ? T{1} : std::exp(x);
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> phi_kernel(const BasicTensor<T>& x);

// Per-channel spatial mean of an H x W x C map.
template <typename T>
BasicTensor<T> gap_spatial(const BasicTensor<T>& x);

// Broadcast a length-C vector to H x W x C.
template <typename T>
BasicTensor<T> expand_spatial(const BasicTensor<T>& v, std::size_t height, std::size_t width);

struct ConvGeometry {
  std::size_t height, width, in_channels;
  std::size_t kernel, out_channels;
  std::size_t stride = 1;

  std::size_t pad() const { return (kernel - 1) / 2; }
  std::size_t out_height() const { return (height + stride - 1) / stride; }
  std::size_t out_width() const { return (width + stride - 1) / stride; }
  std::size_t patch() const { return kernel * kernel * in_channels; }
};

// Validates x[H x W x Cin], w[k x k x Cin x Cout], b[Cout]; k must be odd.
ConvGeometry conv_geometry(const Shape& x, const Shape& w, const Shape& b, std::size_t stride);

// Unfolds zero-padded k x k patches: rows are output pixels, columns (ky, kx, c).
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols);

// Adjoint of im2col: scatters patch gradients back into dx (accumulating).
template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* dx);

// Same-size convolution (zero padding (k-1)/2). With stride s the output is
// ceil(H/s) x ceil(W/s).
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b,
                      std::size_t stride = 1);

}  // namespace gdkvm
