#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "gdkvm/tensor.hpp"

namespace gdkvm {

template <typename T>
struct NamedTensor {
  std::string name;
  BasicTensor<T> value;
};

template <typename T>
using ParameterSet = std::vector<NamedTensor<T>>;

template <typename T>
std::size_t parameter_count(const ParameterSet<T>& params);

// L2 norm over every element of every tensor, accumulated in 64-bit.
template <typename T>
double global_norm(const std::vector<BasicTensor<T>>& grads);

// Rescales all gradients by lambda / norm when norm > lambda. Returns the
// norm measured before clipping. Throws std::invalid_argument for lambda <= 0.
template <typename T>
double clip_global_norm(std::vector<BasicTensor<T>>& grads, double lambda);

struct AdamWConfig {
  double lr = 1e-4;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One decoupled-weight-decay Adam update of a single tensor, in the order
// p <- p (1 - lr wd); m, v <- moments; p <- p - lr m_hat / (sqrt(v_hat) + eps).
// step is 1-based; throws std::invalid_argument for step 0.
template <typename T>
void adamw_step(BasicTensor<T>& param, const BasicTensor<T>& grad, BasicTensor<T>& m, BasicTensor<T>& v,
                const AdamWConfig& cfg, std::size_t step);

template <typename T>
class AdamW {
 public:
  AdamW(const ParameterSet<T>& params, AdamWConfig cfg);

  void step(ParameterSet<T>& params, const std::vector<BasicTensor<T>>& grads);
  std::size_t steps_taken() const { return step_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  std::vector<BasicTensor<T>> m_;
  std::vector<BasicTensor<T>> v_;
  std::size_t step_ = 0;
};

}  // namespace gdkvm
