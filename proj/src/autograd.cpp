#include "gdkvm/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "gdkvm/kernels.hpp"
#include "gdkvm/ops.hpp"

namespace gdkvm::ad {

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var<T> Tape<T>::constant(TensorT v) {
  Node n;
  n.value = std::move(v);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::parameter(TensorT v) {
  Node n;
  n.value = std::move(v);
  n.requires_grad = record_gradients_;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::record(std::vector<std::size_t> inputs, ForwardFn forward, BackwardFn backward) {
  Node n;
  n.value = forward(*this);
  n.requires_grad =
      record_gradients_ && std::any_of(inputs.begin(), inputs.end(), [this](std::size_t i) { return nodes_[i].requires_grad; });
  if (n.requires_grad) n.backward = std::move(backward);
  n.inputs = std::move(inputs);
  n.forward = std::move(forward);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

template <typename T>
BasicTensor<T>& Tape<T>::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.grad_allocated) {
    n.grad = TensorT(n.value.shape());
    n.grad_allocated = true;
  }
  return n.grad;
}

template <typename T>
void Tape<T>::accumulate(std::size_t id, const TensorT& g) {
  if (!nodes_[id].requires_grad) return;
  TensorT& dst = grad(id);
  if (dst.size() != g.size()) throw DimensionError("gradient size mismatch at node " + std::to_string(id));
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

template <typename T>
void Tape<T>::backward(Var<T> root) {
  if (root.tape != this) throw std::invalid_argument("backward: root belongs to another tape");
  if (nodes_[root.id].value.size() != 1) {
    throw DimensionError("backward: root must be a scalar, got shape " + shape_string(nodes_[root.id].value.shape()));
  }
  grad(root.id)[0] += T{1};
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && n.grad_allocated) n.backward(*this, i);
  }
}

template <typename T>
void Tape<T>::set_value(std::size_t id, TensorT v) {
  require_same_shape(nodes_[id].value.shape(), v.shape(), "Tape::set_value");
  nodes_[id].value = std::move(v);
}

template <typename T>
void Tape<T>::replay() {
  for (auto& n : nodes_) {
    if (n.forward) n.value = n.forward(*this);
  }
}

namespace {

template <typename T>
Tape<T>& tape_of(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw std::invalid_argument("operands recorded on different tapes");
  return *a.tape;
}

template <typename T>
const BasicTensor<T>& val(const Tape<T>& t, std::size_t id) {
  return t.value(id);
}

// dfdx(x, y) is the derivative at input x with output y.
template <typename T, typename Fn, typename Df>
Var<T> unary(Var<T> a, Fn f, Df dfdx) {
  const std::size_t ia = a.id;
  return a.tape->record(
      {ia},
      [ia, f](const Tape<T>& t) {
        const auto& x = val(t, ia);
        BasicTensor<T> y(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
        return y;
      },
      [ia, dfdx](Tape<T>& t, std::size_t self) {
        const auto& x = val(t, ia);
        const auto& y = val(t, self);
        const auto& g = t.grad(self);
        BasicTensor<T> dx(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) dx[i] = g[i] * dfdx(x[i], y[i]);
        t.accumulate(ia, dx);
      });
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& tape = tape_of(a, b);
  require_same_shape(a.shape(), b.shape(), "ad::add");
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(
      {ia, ib},
      [ia, ib](const Tape<T>& t) {
        BasicTensor<T> y = val(t, ia);
        const auto& x = val(t, ib);
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += x[i];
        return y;
      },
      [ia, ib](Tape<T>& t, std::size_t self) {
        const BasicTensor<T> g = t.grad(self);
        t.accumulate(ia, g);
        t.accumulate(ib, g);
      });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  auto& tape = tape_of(a, b);
  require_same_shape(a.shape(), b.shape(), "ad::sub");
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(
      {ia, ib},
      [ia, ib](const Tape<T>& t) {
        BasicTensor<T> y = val(t, ia);
        const auto& x = val(t, ib);
        for (std::size_t i = 0; i < y.size(); ++i) y[i] -= x[i];
        return y;
      },
      [ia, ib](Tape<T>& t, std::size_t self) {
        BasicTensor<T> g = t.grad(self);
        t.accumulate(ia, g);
        for (auto& v : g.data()) v = -v;
        t.accumulate(ib, g);
      });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto& tape = tape_of(a, b);
  require_same_shape(a.shape(), b.shape(), "ad::mul");
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(
      {ia, ib},
      [ia, ib](const Tape<T>& t) {
        BasicTensor<T> y = val(t, ia);
        const auto& x = val(t, ib);
        for (std::size_t i = 0; i < y.size(); ++i) y[i] *= x[i];
        return y;
      },
      [ia, ib](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& x = val(t, ia);
        const auto& y = val(t, ib);
        BasicTensor<T> dx(x.shape()), dy(y.shape());
        for (std::size_t i = 0; i < g.size(); ++i) {
          dx[i] = g[i] * y[i];
          dy[i] = g[i] * x[i];
        }
        t.accumulate(ia, dx);
        t.accumulate(ib, dy);
      });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
  return unary<T>(a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <typename T>
Var<T> relu(Var<T> a) {
  return unary<T>(a, [](T x) { return x > T{0} ? x : T{0}; }, [](T x, T) { return x > T{0} ? T{1} : T{0}; });
}

template <typename T>
Var<T> silu(Var<T> a) {
  return unary<T>(
      a, [](T x) { return x * gdkvm::sigmoid(x); },
      [](T x, T) {
        const T s = gdkvm::sigmoid(x);
        return s * (T{1} + x * (T{1} - s));
      });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return unary<T>(a, [](T x) { return gdkvm::sigmoid(x); }, [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var<T> phi(Var<T> a) {
  return unary<T>(a, [](T x) { return gdkvm::phi(x); }, [](T x, T) { return gdkvm::phi_derivative(x); });
}

// ---------------------------------------------------------------------------
// Shape and reductions

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  if (shape_size(shape) != a.value().size()) {
    throw DimensionError("ad::reshape: " + shape_string(a.shape()) + " to " + shape_string(shape));
  }
  const std::size_t ia = a.id;
  return a.tape->record(
      {ia}, [ia, shape](const Tape<T>& t) { return val(t, ia).reshaped(shape); },
      [ia](Tape<T>& t, std::size_t self) {
        t.accumulate(ia, t.grad(self).reshaped(val(t, ia).shape()));
      });
}

template <typename T>
Var<T> sum(Var<T> a) {
  const std::size_t ia = a.id;
  return a.tape->record(
      {ia},
      [ia](const Tape<T>& t) {
        const auto& x = val(t, ia);
        return BasicTensor<T>({1}, std::vector<T>{std::accumulate(x.data().begin(), x.data().end(), T{0})});
      },
      [ia](Tape<T>& t, std::size_t self) {
        t.accumulate(ia, BasicTensor<T>(val(t, ia).shape(), t.grad(self)[0]));
      });
}

template <typename T>
Var<T> dot(Var<T> a, Var<T> b) {
  auto& tape = tape_of(a, b);
  if (a.value().size() != b.value().size()) throw DimensionError("ad::dot: length mismatch");
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(
      {ia, ib},
      [ia, ib](const Tape<T>& t) {
        const auto& x = val(t, ia);
        const auto& y = val(t, ib);
        return BasicTensor<T>({1}, std::vector<T>{kernels::active<T>().dot(x.ptr(), y.ptr(), x.size())});
      },
      [ia, ib](Tape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0];
        const auto& x = val(t, ia);
        const auto& y = val(t, ib);
        BasicTensor<T> dx(x.shape()), dy(y.shape());
        for (std::size_t i = 0; i < x.size(); ++i) {
          dx[i] = g * y[i];
          dy[i] = g * x[i];
        }
        t.accumulate(ia, dx);
        t.accumulate(ib, dy);
      });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& tape = tape_of(a, b);
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.value().dim(1) != b.value().dim(0)) {
    throw DimensionError("ad::matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  const std::size_t ia = a.id, ib = b.id;
  const std::size_t m = a.value().dim(0), k = a.value().dim(1), n = b.value().dim(1);
  return tape.record(
      {ia, ib},
      [=](const Tape<T>& t) {
        BasicTensor<T> c({m, n});
        kernels::active<T>().gemm_nn(m, n, k, val(t, ia).ptr(), val(t, ib).ptr(), c.ptr(), false);
        return c;
      },
      [=](Tape<T>& t, std::size_t self) {
        const auto& K = kernels::active<T>();
        const BasicTensor<T>& g = t.grad(self);
        if (t.requires_grad(ia)) K.gemm_nt(m, k, n, g.ptr(), val(t, ib).ptr(), t.grad(ia).ptr(), true);
        if (t.requires_grad(ib)) K.gemm_tn(k, n, m, val(t, ia).ptr(), g.ptr(), t.grad(ib).ptr(), true);
      });
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  auto& tape = tape_of(a, b);
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.value().dim(1) != b.value().dim(1)) {
    throw DimensionError("ad::matmul_nt: " + shape_string(a.shape()) + " x " + shape_string(b.shape()) + "^T");
  }
  const std::size_t ia = a.id, ib = b.id;
  const std::size_t m = a.value().dim(0), k = a.value().dim(1), n = b.value().dim(0);
  return tape.record(
      {ia, ib},
      [=](const Tape<T>& t) {
        BasicTensor<T> c({m, n});
        kernels::active<T>().gemm_nt(m, n, k, val(t, ia).ptr(), val(t, ib).ptr(), c.ptr(), false);
        return c;
      },
      [=](Tape<T>& t, std::size_t self) {
        const auto& K = kernels::active<T>();
        const BasicTensor<T>& g = t.grad(self);
        if (t.requires_grad(ia)) K.gemm_nn(m, k, n, g.ptr(), val(t, ib).ptr(), t.grad(ia).ptr(), true);
        if (t.requires_grad(ib)) K.gemm_tn(n, k, m, g.ptr(), val(t, ia).ptr(), t.grad(ib).ptr(), true);
      });
}

template <typename T>
Var<T> divide_rows(Var<T> a, Var<T> d) {
  auto& tape = tape_of(a, d);
  if (a.value().rank() != 2 || d.value().size() != a.value().dim(0)) {
    throw DimensionError("ad::divide_rows: divisor must have one entry per row");
  }
  const std::size_t ia = a.id, id = d.id;
  const std::size_t m = a.value().dim(0), n = a.value().dim(1);
  return tape.record(
      {ia, id},
      [=](const Tape<T>& t) {
        BasicTensor<T> y = val(t, ia);
        const auto& den = val(t, id);
        for (std::size_t i = 0; i < m; ++i) {
          if (!(den[i] != T{0})) throw DegenerateError("divide_rows: zero divisor");
          for (std::size_t j = 0; j < n; ++j) y[i * n + j] /= den[i];
        }
        return y;
      },
      [=](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& x = val(t, ia);
        const auto& den = val(t, id);
        BasicTensor<T> dx(x.shape()), dd(den.shape());
        for (std::size_t i = 0; i < m; ++i) {
          T acc = 0;
          for (std::size_t j = 0; j < n; ++j) {
            dx[i * n + j] = g[i * n + j] / den[i];
            acc += g[i * n + j] * x[i * n + j];
          }
          dd[i] = -acc / (den[i] * den[i]);
        }
        t.accumulate(ia, dx);
        t.accumulate(id, dd);
      });
}

// ---------------------------------------------------------------------------
// Spatial

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, std::size_t stride) {
  auto& tape = tape_of(x, w);
  tape_of(x, b);
  const ConvGeometry g = conv_geometry(x.shape(), w.shape(), b.shape(), stride);
  const std::size_t ix = x.id, iw = w.id, ib = b.id;
  const std::size_t out_pixels = g.out_height() * g.out_width();
  const bool direct = g.kernel == 1 && stride == 1;
  auto cols = std::make_shared<std::vector<T>>();
  return tape.record(
      {ix, iw, ib},
      [=](const Tape<T>& t) {
        const auto& input = val(t, ix);
        const auto& bias = val(t, ib);
        BasicTensor<T> out({g.out_height(), g.out_width(), g.out_channels});
        for (std::size_t p = 0; p < out_pixels; ++p) {
          std::copy_n(bias.ptr(), g.out_channels, out.ptr() + p * g.out_channels);
        }
        const T* lhs = input.ptr();
        std::vector<T> local;
        if (!direct) {
          std::vector<T>& buf = t.recording() ? *cols : local;
          buf.resize(out_pixels * g.patch());
          im2col(input.ptr(), g, buf.data());
          lhs = buf.data();
        }
        kernels::active<T>().gemm_nn(out_pixels, g.out_channels, g.patch(), lhs, val(t, iw).ptr(), out.ptr(), true);
        return out;
      },
      [=](Tape<T>& t, std::size_t self) {
        const auto& K = kernels::active<T>();
        const auto& go = t.grad(self);
        const T* patches = direct ? val(t, ix).ptr() : cols->data();
        if (t.requires_grad(iw)) {
          K.gemm_tn(g.patch(), g.out_channels, out_pixels, patches, go.ptr(), t.grad(iw).ptr(), true);
        }
        if (t.requires_grad(ib)) {
          auto& gb = t.grad(ib);
          for (std::size_t p = 0; p < out_pixels; ++p) {
            for (std::size_t c = 0; c < g.out_channels; ++c) gb[c] += go[p * g.out_channels + c];
          }
        }
        if (t.requires_grad(ix)) {
          if (direct) {
            K.gemm_nt(out_pixels, g.patch(), g.out_channels, go.ptr(), val(t, iw).ptr(), t.grad(ix).ptr(), true);
          } else {
            std::vector<T> dcols(out_pixels * g.patch());
            K.gemm_nt(out_pixels, g.patch(), g.out_channels, go.ptr(), val(t, iw).ptr(), dcols.data(), false);
            col2im(dcols.data(), g, t.grad(ix).ptr());
          }
        }
      });
}

template <typename T>
Var<T> avg_pool(Var<T> x, std::size_t factor) {
  const Shape s = x.shape();
  if (s.size() != 3 || factor == 0 || s[0] % factor || s[1] % factor) {
    throw DimensionError("ad::avg_pool: H and W must be divisible by the factor");
  }
  const std::size_t h = s[0] / factor, w = s[1] / factor, c = s[2], W = s[1];
  const T inv = T{1} / static_cast<T>(factor * factor);
  const std::size_t ix = x.id;
  return x.tape->record(
      {ix},
      [=](const Tape<T>& t) {
        const auto& in = val(t, ix);
        BasicTensor<T> out({h, w, c});
        for (std::size_t y = 0; y < h * factor; ++y) {
          for (std::size_t xx = 0; xx < W; ++xx) {
            T* dst = out.ptr() + ((y / factor) * w + xx / factor) * c;
            const T* src = in.ptr() + (y * W + xx) * c;
            for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch] * inv;
          }
        }
        return out;
      },
      [=](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        BasicTensor<T> dx(s);
        for (std::size_t y = 0; y < h * factor; ++y) {
          for (std::size_t xx = 0; xx < W; ++xx) {
            const T* src = g.ptr() + ((y / factor) * w + xx / factor) * c;
            T* dst = dx.ptr() + (y * W + xx) * c;
            for (std::size_t ch = 0; ch < c; ++ch) dst[ch] = src[ch] * inv;
          }
        }
        t.accumulate(ix, dx);
      });
}

template <typename T>
Var<T> upsample_nearest(Var<T> x, std::size_t factor) {
  const Shape s = x.shape();
  if (s.size() != 3 || factor == 0) throw DimensionError("ad::upsample_nearest: H x W x C input required");
  const std::size_t h = s[0], w = s[1], c = s[2], H = h * factor, W = w * factor;
  const std::size_t ix = x.id;
  return x.tape->record(
      {ix},
      [=](const Tape<T>& t) {
        const auto& in = val(t, ix);
        BasicTensor<T> out({H, W, c});
        for (std::size_t y = 0; y < H; ++y) {
          for (std::size_t xx = 0; xx < W; ++xx) {
            std::copy_n(in.ptr() + ((y / factor) * w + xx / factor) * c, c, out.ptr() + (y * W + xx) * c);
          }
        }
        return out;
      },
      [=](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        BasicTensor<T> dx(s);
        for (std::size_t y = 0; y < H; ++y) {
          for (std::size_t xx = 0; xx < W; ++xx) {
            T* dst = dx.ptr() + ((y / factor) * w + xx / factor) * c;
            const T* src = g.ptr() + (y * W + xx) * c;
            for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
          }
        }
        t.accumulate(ix, dx);
      });
}

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  auto& tape = tape_of(a, b);
  const Shape sa = a.shape(), sb = b.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[1] != sb[1]) {
    throw DimensionError("ad::concat_channels: spatial sizes differ");
  }
  const std::size_t hw = sa[0] * sa[1], ca = sa[2], cb = sb[2], ia = a.id, ib = b.id;
  return tape.record(
      {ia, ib},
      [=](const Tape<T>& t) {
        BasicTensor<T> out({sa[0], sa[1], ca + cb});
        for (std::size_t p = 0; p < hw; ++p) {
          std::copy_n(val(t, ia).ptr() + p * ca, ca, out.ptr() + p * (ca + cb));
          std::copy_n(val(t, ib).ptr() + p * cb, cb, out.ptr() + p * (ca + cb) + ca);
        }
        return out;
      },
      [=](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        BasicTensor<T> da(sa), db(sb);
        for (std::size_t p = 0; p < hw; ++p) {
          std::copy_n(g.ptr() + p * (ca + cb), ca, da.ptr() + p * ca);
          std::copy_n(g.ptr() + p * (ca + cb) + ca, cb, db.ptr() + p * cb);
        }
        t.accumulate(ia, da);
        t.accumulate(ib, db);
      });
}

template <typename T>
Var<T> gap(Var<T> x) {
  const Shape s = x.shape();
  if (s.size() != 3) throw DimensionError("ad::gap: H x W x C input required");
  const std::size_t ix = x.id, hw = s[0] * s[1], c = s[2];
  return x.tape->record(
      {ix}, [ix](const Tape<T>& t) { return gap_spatial(val(t, ix)); },
      [=](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        BasicTensor<T> dx(s);
        for (std::size_t p = 0; p < hw; ++p) {
          for (std::size_t ch = 0; ch < c; ++ch) dx[p * c + ch] = g[ch] / static_cast<T>(hw);
        }
        t.accumulate(ix, dx);
      });
}

template <typename T>
Var<T> expand(Var<T> v, std::size_t height, std::size_t width) {
  if (v.value().rank() != 1) throw DimensionError("ad::expand: vector input required");
  const std::size_t iv = v.id, c = v.value().dim(0);
  return v.tape->record(
      {iv}, [=](const Tape<T>& t) { return expand_spatial(val(t, iv), height, width); },
      [=](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        BasicTensor<T> dv({c});
        for (std::size_t p = 0; p < height * width; ++p) {
          for (std::size_t ch = 0; ch < c; ++ch) dv[ch] += g[p * c + ch];
        }
        t.accumulate(iv, dv);
      });
}

template <typename T>
Var<T> state_summary(Var<T> S) {
  if (S.value().rank() != 2) throw DimensionError("ad::state_summary: S must be rank 2");
  const std::size_t is = S.id, cv = S.value().dim(0), ck = S.value().dim(1);
  return S.tape->record(
      {is}, [is](const Tape<T>& t) { return gdkvm::state_summary(val(t, is)); },
      [=](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        BasicTensor<T> dS({cv, ck});
        for (std::size_t i = 0; i < cv; ++i) {
          for (std::size_t j = 0; j < ck; ++j) {
            dS.at(i, j) = g[i] / static_cast<T>(ck) + g[cv + j] / static_cast<T>(cv);
          }
        }
        t.accumulate(is, dS);
      });
}

template <typename T>
Var<T> kpff(Var<T> f_key, Var<T> f_pix, Var<T> gate_w, Var<T> gate_b) {
  require_same_shape(f_key.shape(), f_pix.shape(), "ad::kpff F_Pix");
  const std::size_t h = f_key.shape()[0], w = f_key.shape()[1];
  const Var<T> local = add(f_key, expand(gap(f_key), h, w));
  const Var<T> gate = sigmoid(conv2d(local, gate_w, gate_b));
  // G * L + (1 - G) * P == P + G * (L - P)
  return add(f_pix, mul(gate, sub(local, f_pix)));
}

// ---------------------------------------------------------------------------
// Memory

namespace {

template <typename T>
struct WriteCache {
  std::vector<T> unit_keys;  // N x Ck
  std::vector<T> norms;      // N
  std::vector<T> states;     // (N + 1) x Cv x Ck, states[p] is S before token p
};

}  // namespace

template <typename T>
Var<T> memory_write(Var<T> S, Var<T> keys, Var<T> values, Var<T> alpha, Var<T> beta, MemoryWriteOptions options) {
  auto& tape = tape_of(S, keys);
  tape_of(S, values);
  tape_of(S, alpha);
  tape_of(S, beta);
  if (S.value().rank() != 2 || keys.value().rank() != 2 || values.value().rank() != 2) {
    throw DimensionError("ad::memory_write: rank-2 operands required");
  }
  const std::size_t cv = S.value().dim(0), ck = S.value().dim(1), n = keys.value().dim(0);
  if (keys.value().dim(1) != ck || values.value().dim(1) != cv || values.value().dim(0) != n) {
    throw DimensionError("ad::memory_write: keys " + shape_string(keys.shape()) + " / values " +
                         shape_string(values.shape()) + " do not match state " + shape_string(S.shape()));
  }
  if (alpha.value().size() != 1 || beta.value().size() != 1) throw DimensionError("ad::memory_write: scalar gates");

  const std::size_t iS = S.id, iK = keys.id, iV = values.id, iA = alpha.id, iB = beta.id;
  const std::size_t area = cv * ck;
  const UpdateStrategy strategy = options.strategy;
  const bool full_norm = options.full_norm_gradient;
  auto cache = std::make_shared<WriteCache<T>>();

  auto coefficients = [strategy](const Tape<T>& t, std::size_t ia, std::size_t ib) {
    return strategy_coefficients(strategy, GateValues<T>{val(t, ia)[0], val(t, ib)[0]});
  };

  return tape.record(
      {iS, iK, iV, iA, iB},
      [=](const Tape<T>& t) {
        const auto& Kt = kernels::active<T>();
        const auto& kin = val(t, iK);
        const auto& vin = val(t, iV);
        const UpdateCoefficients<T> c = coefficients(t, iA, iB);
        const bool keep = t.recording();
        WriteCache<T> local;
        WriteCache<T>& wc = keep ? *cache : local;
        wc.unit_keys.resize(n * ck);
        wc.norms.resize(n);
        if (keep) wc.states.resize((n + 1) * area);

        BasicTensor<T> state = val(t, iS);
        std::vector<T> erase(cv), write(cv);
        for (std::size_t p = 0; p < n; ++p) {
          const T* kr = kin.ptr() + p * ck;
          T* k = wc.unit_keys.data() + p * ck;
          const T norm = std::sqrt(Kt.dot(kr, kr, ck));
          if (!(norm > T{0})) throw DegenerateError("memory_write: zero key at token " + std::to_string(p));
          wc.norms[p] = norm;
          for (std::size_t j = 0; j < ck; ++j) k[j] = kr[j] / norm;
          if (keep) std::copy_n(state.ptr(), area, wc.states.data() + p * area);
          for (std::size_t i = 0; i < cv; ++i) {
            erase[i] = c.erase * Kt.dot(state.ptr() + i * ck, k, ck);
            write[i] = c.write * vin[p * cv + i];
          }
          Kt.decay_rank2(state.ptr(), cv, ck, p == 0 ? c.decay : T{1}, erase.data(), write.data(), k);
        }
        if (keep) std::copy_n(state.ptr(), area, wc.states.data() + n * area);
        return state;
      },
      [=](Tape<T>& t, std::size_t self) {
        const auto& Kt = kernels::active<T>();
        const UpdateCoefficients<T> c = coefficients(t, iA, iB);
        const auto& vin = val(t, iV);
        const WriteCache<T>& wc = *cache;

        BasicTensor<T> G = t.grad(self);
        BasicTensor<T> dK({n, ck}), dV({n, cv});
        std::vector<T> u(cv), a(cv), b(cv), Gk(cv), du(cv), dk(ck), zero(cv, T{0});
        T d_decay = 0, d_erase = 0, d_write = 0;
        for (std::size_t p = n; p-- > 0;) {
          const T* Sp = wc.states.data() + p * area;
          const T* k = wc.unit_keys.data() + p * ck;
          const T* v = vin.ptr() + p * cv;
          const T decay = p == 0 ? c.decay : T{1};
          for (std::size_t i = 0; i < cv; ++i) {
            u[i] = Kt.dot(Sp + i * ck, k, ck);
            a[i] = c.erase * u[i];
            b[i] = c.write * v[i];
            Gk[i] = Kt.dot(G.ptr() + i * ck, k, ck);
          }
          if (p == 0) d_decay = Kt.dot(G.ptr(), Sp, area) - Kt.dot(Gk.data(), a.data(), cv);
          // dk = G^T (b - decay a) + Sp^T du, with du = erase * (-decay G k)
          std::fill(dk.begin(), dk.end(), T{0});
          for (std::size_t i = 0; i < cv; ++i) {
            Kt.axpy(b[i] - decay * a[i], G.ptr() + i * ck, dk.data(), ck);
            du[i] = -c.erase * decay * Gk[i];
            Kt.axpy(du[i], Sp + i * ck, dk.data(), ck);
          }
          d_erase += -decay * Kt.dot(Gk.data(), u.data(), cv);
          d_write += Kt.dot(Gk.data(), v, cv);
          for (std::size_t i = 0; i < cv; ++i) dV[p * cv + i] = c.write * Gk[i];

          const T norm = wc.norms[p];
          T* dkr = dK.ptr() + p * ck;
          const T proj = full_norm ? Kt.dot(k, dk.data(), ck) : T{0};
          for (std::size_t j = 0; j < ck; ++j) dkr[j] = (dk[j] - k[j] * proj) / norm;

          // dS_p = decay G + du k^T
          Kt.decay_rank2(G.ptr(), cv, ck, decay, zero.data(), du.data(), k);
        }
        t.accumulate(iS, G);
        t.accumulate(iK, dK);
        t.accumulate(iV, dV);

        T d_alpha = 0, d_beta = 0;
        switch (strategy) {
          case UpdateStrategy::kBaseline:
          case UpdateStrategy::kSanityCheck: break;
          case UpdateStrategy::kNoAlpha: d_beta = d_erase + d_write; break;
          case UpdateStrategy::kNoBeta: d_alpha = d_decay; break;
          case UpdateStrategy::kGDR:
            d_alpha = d_decay;
            d_beta = d_erase + d_write;
            break;
        }
        t.accumulate(iA, BasicTensor<T>(val(t, iA).shape(), d_alpha));
        t.accumulate(iB, BasicTensor<T>(val(t, iB).shape(), d_beta));
      });
}

template <typename T>
Var<T> key_accumulate(Var<T> Z, Var<T> keys, const Var<T>* decay, bool full_norm_gradient) {
  auto& tape = tape_of(Z, keys);
  const std::size_t ck = Z.value().size();
  if (keys.value().rank() != 2 || keys.value().dim(1) != ck) throw DimensionError("ad::key_accumulate: key width");
  const std::size_t n = keys.value().dim(0), iZ = Z.id, iK = keys.id;
  const bool has_decay = decay != nullptr;
  const std::size_t iD = has_decay ? decay->id : iZ;
  std::vector<std::size_t> inputs{iZ, iK};
  if (has_decay) inputs.push_back(iD);
  return tape.record(
      inputs,
      [=](const Tape<T>& t) {
        const auto& Kt = kernels::active<T>();
        BasicTensor<T> z = val(t, iZ);
        if (has_decay) {
          const T d = val(t, iD)[0];
          for (auto& v : z.data()) v *= d;
        }
        const auto& kin = val(t, iK);
        for (std::size_t p = 0; p < n; ++p) {
          const T* kr = kin.ptr() + p * ck;
          const T norm = std::sqrt(Kt.dot(kr, kr, ck));
          if (!(norm > T{0})) throw DegenerateError("key_accumulate: zero key");
          for (std::size_t j = 0; j < ck; ++j) z[j] += kr[j] / norm;
        }
        return z;
      },
      [=](Tape<T>& t, std::size_t self) {
        const auto& Kt = kernels::active<T>();
        const auto& g = t.grad(self);
        const T d = has_decay ? val(t, iD)[0] : T{1};
        BasicTensor<T> dZ(g.shape());
        for (std::size_t j = 0; j < ck; ++j) dZ[j] = d * g[j];
        t.accumulate(iZ, dZ);
        if (has_decay) t.accumulate(iD, BasicTensor<T>(val(t, iD).shape(), Kt.dot(g.ptr(), val(t, iZ).ptr(), ck)));
        const auto& kin = val(t, iK);
        BasicTensor<T> dK(kin.shape());
        for (std::size_t p = 0; p < n; ++p) {
          const T* kr = kin.ptr() + p * ck;
          const T norm = std::sqrt(Kt.dot(kr, kr, ck));
          T proj = 0;
          if (full_norm_gradient) proj = Kt.dot(kr, g.ptr(), ck) / norm;
          for (std::size_t j = 0; j < ck; ++j) dK[p * ck + j] = (g[j] - (kr[j] / norm) * proj) / norm;
        }
        t.accumulate(iK, dK);
      });
}

// ---------------------------------------------------------------------------
// Losses

template <typename T>
Var<T> bce_with_logits(Var<T> logits, const BasicTensor<T>& target) {
  require_same_shape(logits.shape(), target.shape(), "bce_with_logits target");
  const std::size_t ix = logits.id;
  return logits.tape->record(
      {ix},
      [ix, target](const Tape<T>& t) {
        const auto& x = val(t, ix);
        T acc = 0;
        for (std::size_t i = 0; i < x.size(); ++i) {
          acc += std::max(x[i], T{0}) - x[i] * target[i] + std::log1p(std::exp(-std::abs(x[i])));
        }
        return BasicTensor<T>({1}, std::vector<T>{acc / static_cast<T>(x.size())});
      },
      [ix, target](Tape<T>& t, std::size_t self) {
        const auto& x = val(t, ix);
        const T g = t.grad(self)[0] / static_cast<T>(x.size());
        BasicTensor<T> dx(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) dx[i] = g * (gdkvm::sigmoid(x[i]) - target[i]);
        t.accumulate(ix, dx);
      });
}

template <typename T>
Var<T> soft_dice_loss(Var<T> logits, const BasicTensor<T>& target, T eps) {
  require_same_shape(logits.shape(), target.shape(), "soft_dice_loss target");
  const std::size_t ix = logits.id;
  auto totals = [target, eps](const BasicTensor<T>& x) {
    T inter = 0, psum = 0, gsum = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const T p = gdkvm::sigmoid(x[i]);
      inter += p * target[i];
      psum += p;
      gsum += target[i];
    }
    return std::pair<T, T>{inter, psum + gsum + eps};
  };
  return logits.tape->record(
      {ix},
      [ix, totals](const Tape<T>& t) {
        const auto [inter, denom] = totals(val(t, ix));
        return BasicTensor<T>({1}, std::vector<T>{T{1} - T{2} * inter / denom});
      },
      [ix, totals, target](Tape<T>& t, std::size_t self) {
        const auto& x = val(t, ix);
        const auto [inter, denom] = totals(x);
        const T g = t.grad(self)[0];
        BasicTensor<T> dx(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) {
          const T p = gdkvm::sigmoid(x[i]);
          const T dp = -T{2} * target[i] / denom + T{2} * inter / (denom * denom);
          dx[i] = g * dp * p * (T{1} - p);
        }
        t.accumulate(ix, dx);
      });
}

#define GDKVM_INSTANTIATE_AD(T)                                                                       \
  template class Tape<T>;                                                                             \
  template Var<T> add(Var<T>, Var<T>);                                                                \
  template Var<T> sub(Var<T>, Var<T>);                                                                \
  template Var<T> mul(Var<T>, Var<T>);                                                                \
  template Var<T> scale(Var<T>, T);                                                                   \
  template Var<T> relu(Var<T>);                                                                       \
  template Var<T> silu(Var<T>);                                                                       \
  template Var<T> sigmoid(Var<T>);                                                                    \
  template Var<T> phi(Var<T>);                                                                        \
  template Var<T> reshape(Var<T>, Shape);                                                             \
  template Var<T> sum(Var<T>);                                                                        \
  template Var<T> dot(Var<T>, Var<T>);                                                                \
  template Var<T> matmul(Var<T>, Var<T>);                                                             \
  template Var<T> matmul_nt(Var<T>, Var<T>);                                                          \
  template Var<T> divide_rows(Var<T>, Var<T>);                                                        \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, std::size_t);                                        \
  template Var<T> avg_pool(Var<T>, std::size_t);                                                      \
  template Var<T> upsample_nearest(Var<T>, std::size_t);                                              \
  template Var<T> concat_channels(Var<T>, Var<T>);                                                    \
  template Var<T> gap(Var<T>);                                                                        \
  template Var<T> expand(Var<T>, std::size_t, std::size_t);                                           \
  template Var<T> state_summary(Var<T>);                                                              \
  template Var<T> kpff(Var<T>, Var<T>, Var<T>, Var<T>);                                               \
  template Var<T> memory_write(Var<T>, Var<T>, Var<T>, Var<T>, Var<T>, MemoryWriteOptions);           \
  template Var<T> key_accumulate(Var<T>, Var<T>, const Var<T>*, bool);                                \
  template Var<T> bce_with_logits(Var<T>, const BasicTensor<T>&);                                     \
  template Var<T> soft_dice_loss(Var<T>, const BasicTensor<T>&, T);

GDKVM_INSTANTIATE_AD(float)
GDKVM_INSTANTIATE_AD(double)

#undef GDKVM_INSTANTIATE_AD

}  // namespace gdkvm::ad
