#include "gdkvm/ops.hpp"

#include <algorithm>
#include <type_traits>

#include "gdkvm/kernels.hpp"

namespace gdkvm {

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul: operands must be rank 2");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions differ: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  BasicTensor<T> c({m, n});
  kernels::active<T>().gemm_nn(m, n, k, a.ptr(), b.ptr(), c.ptr(), false);
  return c;
}

template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x) {
  if (x.rank() != 2) throw DimensionError("softmax_rows: rank-2 input required");
  const std::size_t m = x.dim(0), n = x.dim(1);
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = x.ptr() + i * n;
    T* out = y.ptr() + i * n;
    const T mx = *std::max_element(row, row + n);
    T sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      out[j] = std::exp(row[j] - mx);
      sum += out[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[j] /= sum;
  }
  return y;
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = sigmoid(x[i]);
  return y;
}

template <typename T>
BasicTensor<T> phi_kernel(const BasicTensor<T>& x) {
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = phi(x[i]);
  return y;
}

template <typename T>
BasicTensor<T> gap_spatial(const BasicTensor<T>& x) {
  if (x.rank() != 3) throw DimensionError("gap_spatial: H x W x C input required");
  const std::size_t hw = x.dim(0) * x.dim(1), c = x.dim(2);
  // A wider accumulator keeps the sum of a constant map exact (up to 2^11
  // pixels for double), so gap(expand(v)) == v.
  using Acc = std::conditional_t<std::is_same_v<T, float>, double, long double>;
  std::vector<Acc> acc(c, Acc{0});
  for (std::size_t p = 0; p < hw; ++p) {
    for (std::size_t ch = 0; ch < c; ++ch) acc[ch] += x[p * c + ch];
  }
  BasicTensor<T> out({c});
  for (std::size_t ch = 0; ch < c; ++ch) out[ch] = static_cast<T>(acc[ch] / static_cast<Acc>(hw));
  return out;
}

template <typename T>
BasicTensor<T> expand_spatial(const BasicTensor<T>& v, std::size_t height, std::size_t width) {
  if (v.rank() != 1) throw DimensionError("expand_spatial: vector input required");
  const std::size_t c = v.dim(0);
  BasicTensor<T> out({height, width, c});
  for (std::size_t p = 0; p < height * width; ++p) std::copy_n(v.ptr(), c, out.ptr() + p * c);
  return out;
}

ConvGeometry conv_geometry(const Shape& x, const Shape& w, const Shape& b, std::size_t stride) {
  if (x.size() != 3) throw DimensionError("conv2d: input must be H x W x Cin");
  if (w.size() != 4 || w[0] != w[1]) throw DimensionError("conv2d: weight must be k x k x Cin x Cout");
  if (w[0] % 2 == 0) throw DimensionError("conv2d: kernel size must be odd");
  if (w[2] != x[2]) {
    throw DimensionError("conv2d: input channels " + std::to_string(x[2]) + " vs weight " + std::to_string(w[2]));
  }
  if (b.size() != 1 || b[0] != w[3]) throw DimensionError("conv2d: bias must have Cout entries");
  if (stride == 0) throw DimensionError("conv2d: stride must be >= 1");
  return ConvGeometry{x[0], x[1], x[2], w[0], w[3], stride};
}

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad());
  const std::size_t oh = g.out_height(), ow = g.out_width(), patch = g.patch();
  const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(g.height), W = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      T* row = cols + (oy * ow + ox) * patch;
      for (std::size_t ky = 0; ky < g.kernel; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
        for (std::size_t kx = 0; kx < g.kernel; ++kx) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
          T* dst = row + (ky * g.kernel + kx) * g.in_channels;
          if (iy < 0 || iy >= H || ix < 0 || ix >= W) {
            std::fill_n(dst, g.in_channels, T{0});
          } else {
            std::copy_n(x + (static_cast<std::size_t>(iy) * g.width + static_cast<std::size_t>(ix)) * g.in_channels,
                        g.in_channels, dst);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* dx) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad());
  const std::size_t oh = g.out_height(), ow = g.out_width(), patch = g.patch();
  const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(g.height), W = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      const T* row = cols + (oy * ow + ox) * patch;
      for (std::size_t ky = 0; ky < g.kernel; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
        if (iy < 0 || iy >= H) continue;
        for (std::size_t kx = 0; kx < g.kernel; ++kx) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
          if (ix < 0 || ix >= W) continue;
          const T* src = row + (ky * g.kernel + kx) * g.in_channels;
          T* dst = dx + (static_cast<std::size_t>(iy) * g.width + static_cast<std::size_t>(ix)) * g.in_channels;
          for (std::size_t c = 0; c < g.in_channels; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b, std::size_t stride) {
  const ConvGeometry g = conv_geometry(x.shape(), w.shape(), b.shape(), stride);
  const std::size_t oh = g.out_height(), ow = g.out_width();
  BasicTensor<T> out({oh, ow, g.out_channels});
  for (std::size_t p = 0; p < oh * ow; ++p) std::copy_n(b.ptr(), g.out_channels, out.ptr() + p * g.out_channels);
  if (g.kernel == 1 && stride == 1) {
    kernels::active<T>().gemm_nn(oh * ow, g.out_channels, g.in_channels, x.ptr(), w.ptr(), out.ptr(), true);
    return out;
  }
  std::vector<T> cols(oh * ow * g.patch());
  im2col(x.ptr(), g, cols.data());
  kernels::active<T>().gemm_nn(oh * ow, g.out_channels, g.patch(), cols.data(), w.ptr(), out.ptr(), true);
  return out;
}

#define GDKVM_INSTANTIATE_OPS(T)                                                                     \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                      \
  template BasicTensor<T> softmax_rows(const BasicTensor<T>&);                                       \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                            \
  template BasicTensor<T> phi_kernel(const BasicTensor<T>&);                                         \
  template BasicTensor<T> gap_spatial(const BasicTensor<T>&);                                        \
  template BasicTensor<T> expand_spatial(const BasicTensor<T>&, std::size_t, std::size_t);           \
  template void im2col(const T*, const ConvGeometry&, T*);                                           \
  template void col2im(const T*, const ConvGeometry&, T*);                                           \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, \
                                 std::size_t);

GDKVM_INSTANTIATE_OPS(float)
GDKVM_INSTANTIATE_OPS(double)

#undef GDKVM_INSTANTIATE_OPS

}  // namespace gdkvm
