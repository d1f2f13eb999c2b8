#include "gdkvm/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace gdkvm {

template <typename T>
std::size_t parameter_count(const ParameterSet<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.value.size();
  return n;
}

template <typename T>
double global_norm(const std::vector<BasicTensor<T>>& grads) {
  double acc = 0;
  for (const auto& g : grads) {
    for (T x : g.data()) acc += static_cast<double>(x) * static_cast<double>(x);
  }
  return std::sqrt(acc);
}

template <typename T>
double clip_global_norm(std::vector<BasicTensor<T>>& grads, double lambda) {
  if (!(lambda > 0)) throw std::invalid_argument("clip_global_norm: lambda must be positive");
  const double norm = global_norm(grads);
  if (norm > lambda) {
    const T s = static_cast<T>(lambda / norm);
    for (auto& g : grads) {
      for (T& x : g.data()) x *= s;
    }
  }
  return norm;
}

template <typename T>
void adamw_step(BasicTensor<T>& param, const BasicTensor<T>& grad, BasicTensor<T>& m, BasicTensor<T>& v,
                const AdamWConfig& cfg, std::size_t step) {
  if (step == 0) throw std::invalid_argument("adamw_step: step is 1-based");
  require_same_shape(param.shape(), grad.shape(), "adamw_step grad");
  require_same_shape(param.shape(), m.shape(), "adamw_step m");
  require_same_shape(param.shape(), v.shape(), "adamw_step v");
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  const double shrink = 1.0 - cfg.lr * cfg.weight_decay;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    double p = static_cast<double>(param[i]) * shrink;
    const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
    const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    p -= cfg.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps);
    param[i] = static_cast<T>(p);
  }
}

template <typename T>
AdamW<T>::AdamW(const ParameterSet<T>& params, AdamWConfig cfg) : cfg_(cfg) {
  for (const auto& p : params) {
    m_.emplace_back(p.value.shape());
    v_.emplace_back(p.value.shape());
  }
}

template <typename T>
void AdamW<T>::step(ParameterSet<T>& params, const std::vector<BasicTensor<T>>& grads) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw std::invalid_argument("AdamW::step: parameter count changed");
  }
  ++step_;
  for (std::size_t i = 0; i < params.size(); ++i) adamw_step(params[i].value, grads[i], m_[i], v_[i], cfg_, step_);
}

template std::size_t parameter_count(const ParameterSet<float>&);
template std::size_t parameter_count(const ParameterSet<double>&);
template double global_norm(const std::vector<Tensor>&);
template double global_norm(const std::vector<Tensor64>&);
template double clip_global_norm(std::vector<Tensor>&, double);
template double clip_global_norm(std::vector<Tensor64>&, double);
template void adamw_step(Tensor&, const Tensor&, Tensor&, Tensor&, const AdamWConfig&, std::size_t);
template void adamw_step(Tensor64&, const Tensor64&, Tensor64&, Tensor64&, const AdamWConfig&, std::size_t);
template class AdamW<float>;
template class AdamW<double>;

}  // namespace gdkvm
