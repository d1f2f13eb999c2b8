#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "gdkvm/memory_rules.hpp"
#include "gdkvm/tensor.hpp"

// Minimal reverse-mode differentiation. A Tape records each primitive's
// forward closure and its adjoint; values are recomputable (replay) and
// gradients accumulate by summation into each input.
namespace gdkvm::ad {

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const BasicTensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
};

template <typename T>
class Tape {
 public:
  using TensorT = BasicTensor<T>;
  using ForwardFn = std::function<TensorT(const Tape&)>;
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  // When grad recording is off every node is treated as a constant and no
  // backward closures or caches are kept.
  explicit Tape(bool record_gradients = true) : record_gradients_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(TensorT v);
  Var<T> parameter(TensorT v);
  Var<T> record(std::vector<std::size_t> inputs, ForwardFn forward, BackwardFn backward);

  const TensorT& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool recording() const { return record_gradients_; }

  // Gradient buffer of a node, zero-initialised on first access.
  TensorT& grad(std::size_t id);
  bool has_grad(std::size_t id) const { return nodes_[id].grad_allocated; }
  // grad(id) += g, skipped for nodes that do not require gradients.
  void accumulate(std::size_t id, const TensorT& g);

  // Seeds d(root)/d(root) = 1 and propagates to every recorded input.
  // Throws DimensionError unless the root holds exactly one element.
  void backward(Var<T> root);

  // Overwrite a leaf value; replay() then recomputes every recorded node in order.
  void set_value(std::size_t id, TensorT v);
  void replay();

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    TensorT value;
    TensorT grad;
    bool grad_allocated = false;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    ForwardFn forward;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool record_gradients_;
};

template <typename T>
const BasicTensor<T>& Var<T>::value() const {
  return tape->value(id);
}

// Elementwise arithmetic on equal shapes.
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T c);

template <typename T> Var<T> relu(Var<T> a);
template <typename T> Var<T> silu(Var<T> a);
template <typename T> Var<T> sigmoid(Var<T> a);
template <typename T> Var<T> phi(Var<T> a);

template <typename T> Var<T> reshape(Var<T> a, Shape shape);
template <typename T> Var<T> sum(Var<T> a);    // shape {1}
template <typename T> Var<T> dot(Var<T> a, Var<T> b);  // shape {1}

// a[m x k] * b[k x n]
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
// a[m x k] * b[n x k]^T
template <typename T> Var<T> matmul_nt(Var<T> a, Var<T> b);
// Row i of a[m x n] divided by d[i] (d is m x 1 or length m).
template <typename T> Var<T> divide_rows(Var<T> a, Var<T> d);

// x[H x W x Cin], w[k x k x Cin x Cout], b[Cout]; zero padding (k-1)/2.
template <typename T> Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, std::size_t stride = 1);
// Non-overlapping mean pooling; H and W must divide by factor.
template <typename T> Var<T> avg_pool(Var<T> x, std::size_t factor);
template <typename T> Var<T> upsample_nearest(Var<T> x, std::size_t factor);
template <typename T> Var<T> concat_channels(Var<T> a, Var<T> b);
template <typename T> Var<T> gap(Var<T> x);  // H x W x C -> C
template <typename T> Var<T> expand(Var<T> v, std::size_t height, std::size_t width);

// Row means of S followed by column means.
template <typename T> Var<T> state_summary(Var<T> S);

// G = sigmoid(conv3x3(F_K + expand(gap(F_K)))); G*(F_K + F_Global) + (1-G)*F_Pix.
template <typename T> Var<T> kpff(Var<T> f_key, Var<T> f_pix, Var<T> gate_w, Var<T> gate_b);

struct MemoryWriteOptions {
  UpdateStrategy strategy = UpdateStrategy::kGDR;
  // Differentiate through the key norm; otherwise the norm is held constant
  // (straight-through on the normalization scale).
  bool full_norm_gradient = false;
};

// Writes the rows of keys [N x Ck] / values [N x Cv] into S [Cv x Ck] one
// token at a time in row order. alpha and beta ({1}) are the frame's gates;
// the decay alpha is applied once, at the first token, and beta at every
// token, per the strategy's coefficients.
template <typename T>
Var<T> memory_write(Var<T> S, Var<T> keys, Var<T> values, Var<T> alpha, Var<T> beta, MemoryWriteOptions options);

// Z' = decay * Z + sum of the L2-normalized key rows (decay is {1}, or null
// for no decay).
template <typename T>
Var<T> key_accumulate(Var<T> Z, Var<T> keys, const Var<T>* decay, bool full_norm_gradient);

// Mean binary cross-entropy of sigmoid(logits) against a {0,1} target.
template <typename T> Var<T> bce_with_logits(Var<T> logits, const BasicTensor<T>& target);
// 1 - 2 sum(p g) / (sum p + sum g + eps), p = sigmoid(logits).
template <typename T> Var<T> soft_dice_loss(Var<T> logits, const BasicTensor<T>& target, T eps = T(1e-6));

}  // namespace gdkvm::ad
