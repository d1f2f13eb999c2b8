#include "gdkvm/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "gdkvm/error.hpp"
#include "gdkvm/rng.hpp"
#include "gdkvm/tensor_io.hpp"

namespace gdkvm {

namespace {

enum Param : std::size_t {
  kKey1W, kKey1B, kKey2W, kKey2B,
  kPixW, kPixB,
  kKpffW, kKpffB,
  kGateWA, kGateWB, kGateBA, kGateBB,
  kVal1W, kVal1B, kVal2W, kVal2B,
  kDec1W, kDec1B, kDec2W, kDec2B,
  kParamCount
};

template <typename T>
BasicTensor<T> conv_weight(Rng& rng, std::size_t k, std::size_t cin, std::size_t cout) {
  BasicTensor<T> w({k, k, cin, cout});
  const double sd = std::sqrt(1.0 / static_cast<double>(k * k * cin));
  for (auto& v : w.data()) v = static_cast<T>(rng.normal() * sd);
  return w;
}

}  // namespace

template <typename T>
ParameterSet<T> init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.key_dim == 0 || cfg.value_dim == 0 || cfg.hidden == 0 || cfg.decoder_hidden == 0) {
    throw std::invalid_argument("model: channel counts must be >= 1");
  }
  Rng rng(seed, 0x90de1);
  const std::size_t h = cfg.hidden, ck = cfg.key_dim, cv = cfg.value_dim, dh = cfg.decoder_hidden;
  const GateProjection<T> gate = GateProjection<T>::initial(cv, ck);
  ParameterSet<T> p;
  p.push_back({"key.conv1.w", conv_weight<T>(rng, 3, 1, h)});
  p.push_back({"key.conv1.b", BasicTensor<T>({h})});
  p.push_back({"key.conv2.w", conv_weight<T>(rng, 3, h, ck)});
  p.push_back({"key.conv2.b", BasicTensor<T>({ck})});
  p.push_back({"pix.w", conv_weight<T>(rng, 1, 1, ck)});
  p.push_back({"pix.b", BasicTensor<T>({ck})});
  p.push_back({"kpff.w", conv_weight<T>(rng, 3, ck, ck)});
  p.push_back({"kpff.b", BasicTensor<T>({ck})});
  p.push_back({"gate.w_alpha", gate.w_alpha});
  p.push_back({"gate.w_beta", gate.w_beta});
  p.push_back({"gate.b_alpha", BasicTensor<T>({1}, gate.b_alpha)});
  p.push_back({"gate.b_beta", BasicTensor<T>({1}, gate.b_beta)});
  p.push_back({"value.conv1.w", conv_weight<T>(rng, 3, 2, h)});
  p.push_back({"value.conv1.b", BasicTensor<T>({h})});
  p.push_back({"value.conv2.w", conv_weight<T>(rng, 3, h, cv)});
  p.push_back({"value.conv2.b", BasicTensor<T>({cv})});
  p.push_back({"dec.conv1.w", conv_weight<T>(rng, 3, cv, dh)});
  p.push_back({"dec.conv1.b", BasicTensor<T>({dh})});
  p.push_back({"dec.conv2.w", conv_weight<T>(rng, 3, dh, 1)});
  p.push_back({"dec.conv2.b", BasicTensor<T>({1})});
  return p;
}

template <typename T>
std::vector<ad::Var<T>> bind_parameters(ad::Tape<T>& tape, const ParameterSet<T>& params) {
  std::vector<ad::Var<T>> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(tape.parameter(p.value));
  return vars;
}

template <typename T>
ForwardTrace<T> forward(ad::Tape<T>& tape, const std::vector<ad::Var<T>>& P, const ModelConfig& cfg,
                        const BasicTensor<T>& frames, const BasicTensor<T>& first_mask) {
  if (P.size() != kParamCount) throw std::invalid_argument("forward: expected " + std::to_string(kParamCount) + " parameters");
  if (frames.rank() != 4 || frames.dim(3) != 1) throw DimensionError("forward: frames must be T x H x W x 1");
  const std::size_t T_len = frames.dim(0), H = frames.dim(1), W = frames.dim(2);
  if (H % kFeatureStride || W % kFeatureStride) throw DimensionError("forward: H and W must be multiples of 4");
  require_same_shape(first_mask.shape(), Shape{H, W, 1}, "forward first mask");
  const std::size_t h4 = H / kFeatureStride, w4 = W / kFeatureStride, n = h4 * w4;
  const std::size_t ck = cfg.key_dim, cv = cfg.value_dim;

  const ad::MemoryWriteOptions opts{cfg.strategy, cfg.full_norm_gradient};
  const bool decays = cfg.strategy == UpdateStrategy::kGDR || cfg.strategy == UpdateStrategy::kNoBeta;

  auto frame = [&](std::size_t t) {
    std::vector<T> data(frames.data().begin() + static_cast<std::ptrdiff_t>(t * H * W),
                        frames.data().begin() + static_cast<std::ptrdiff_t>((t + 1) * H * W));
    return tape.constant(BasicTensor<T>({H, W, 1}, std::move(data)));
  };
  auto keys_of = [&](ad::Var<T> x) {
    ad::Var<T> f = ad::silu(ad::conv2d(x, P[kKey1W], P[kKey1B], 2));
    f = ad::conv2d(f, P[kKey2W], P[kKey2B], 2);
    if (cfg.kpff) {
      const ad::Var<T> pix = ad::conv2d(ad::avg_pool(x, kFeatureStride), P[kPixW], P[kPixB]);
      f = ad::kpff(f, pix, P[kKpffW], P[kKpffB]);
    }
    return ad::reshape(ad::phi(f), {n, ck});
  };
  auto values_of = [&](ad::Var<T> x, ad::Var<T> mask) {
    ad::Var<T> v = ad::silu(ad::conv2d(ad::concat_channels(x, mask), P[kVal1W], P[kVal1B], 2));
    return ad::reshape(ad::conv2d(v, P[kVal2W], P[kVal2B], 2), {n, cv});
  };
  auto decode = [&](ad::Var<T> S, const ad::Var<T>* Z, ad::Var<T> q) {
    ad::Var<T> r = ad::matmul_nt(q, S);
    if (Z) r = ad::divide_rows(r, ad::matmul_nt(q, ad::reshape(*Z, {1, ck})));
    ad::Var<T> y = ad::upsample_nearest(ad::reshape(r, {h4, w4, cv}), 2);
    y = ad::silu(ad::conv2d(y, P[kDec1W], P[kDec1B]));
    return ad::conv2d(ad::upsample_nearest(y, 2), P[kDec2W], P[kDec2B]);
  };

  ForwardTrace<T> out;
  ad::Var<T> S = tape.constant(BasicTensor<T>({cv, ck}));
  ad::Var<T> Z = tape.constant(BasicTensor<T>({ck}));
  auto write = [&](ad::Var<T> keys, ad::Var<T> values) {
    const ad::Var<T> summary = ad::state_summary(S);
    const ad::Var<T> alpha = ad::sigmoid(ad::add(ad::dot(P[kGateWA], summary), P[kGateBA]));
    const ad::Var<T> beta = ad::sigmoid(ad::add(ad::dot(P[kGateWB], summary), P[kGateBB]));
    S = ad::memory_write(S, keys, values, alpha, beta, opts);
    if (cfg.normalize) Z = ad::key_accumulate(Z, keys, decays ? &alpha : nullptr, cfg.full_norm_gradient);
    out.alpha.push_back(alpha);
    out.beta.push_back(beta);
  };

  for (std::size_t t = 0; t < T_len; ++t) {
    const ad::Var<T> x = frame(t);
    const ad::Var<T> keys = keys_of(x);
    if (t == 0) {
      write(keys, values_of(x, tape.constant(first_mask)));
      out.logits.push_back(decode(S, cfg.normalize ? &Z : nullptr, keys));
      continue;
    }
    const ad::Var<T> logits = decode(S, cfg.normalize ? &Z : nullptr, keys);
    out.logits.push_back(logits);
    if (t + 1 < T_len) write(keys, values_of(x, ad::sigmoid(logits)));
  }
  out.state = S;
  return out;
}

std::vector<std::size_t> default_supervision(std::size_t frames) {
  if (frames <= 1) return {0};
  return {0, frames - 1};
}

template <typename T>
ad::Var<T> sequence_loss(const std::vector<ad::Var<T>>& logits, const std::vector<BasicTensor<T>>& truth,
                         const std::vector<std::size_t>& supervised) {
  if (supervised.empty()) throw std::invalid_argument("sequence_loss: empty supervision set");
  if (truth.size() != logits.size()) throw DimensionError("sequence_loss: one truth mask per frame required");
  std::optional<ad::Var<T>> total;
  for (std::size_t t : supervised) {
    if (t >= logits.size()) throw std::invalid_argument("sequence_loss: supervised frame out of range");
    const ad::Var<T> term = ad::add(ad::bce_with_logits(logits[t], truth[t]), ad::soft_dice_loss(logits[t], truth[t]));
    total = total ? ad::add(*total, term) : term;
  }
  return ad::scale(*total, static_cast<T>(0.5 / static_cast<double>(supervised.size())));
}

std::vector<MaskGrid> predict(const ParameterSet<float>& params, const ModelConfig& cfg, const Tensor& frames,
                              const MaskGrid& first_mask) {
  ad::Tape<float> tape(false);
  const auto vars = bind_parameters(tape, params);
  const Tensor m0 = first_mask.to_tensor().cast<float>().reshaped({first_mask.height(), first_mask.width(), 1});
  const ForwardTrace<float> trace = forward(tape, vars, cfg, frames, m0);
  std::vector<MaskGrid> out;
  for (const auto& l : trace.logits) out.push_back(MaskGrid::threshold(l.value(), 0.0f));
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const ParameterSet<float>& params, const ModelConfig& cfg,
                     std::size_t step) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const auto& p : params) write_tensor(os, p.value);
  std::ofstream man(path.string() + ".manifest");
  if (!man) throw std::runtime_error("cannot write manifest for " + path.string());
  man << "gdkvm-checkpoint 1\n"
      << "step " << step << '\n'
      << "key_dim " << cfg.key_dim << '\n'
      << "value_dim " << cfg.value_dim << '\n'
      << "hidden " << cfg.hidden << '\n'
      << "decoder_hidden " << cfg.decoder_hidden << '\n'
      << "strategy " << strategy_name(cfg.strategy) << '\n'
      << "kpff " << (cfg.kpff ? "on" : "off") << '\n'
      << "normalize " << (cfg.normalize ? "on" : "off") << '\n'
      << "tensors " << params.size() << '\n';
  for (const auto& p : params) man << p.name << ' ' << shape_string(p.value.shape()) << '\n';
  if (!os || !man) throw std::runtime_error("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream man(path.string() + ".manifest");
  if (!man) throw std::runtime_error("cannot open " + path.string() + ".manifest");
  std::string tag;
  int version = 0;
  man >> tag >> version;
  if (tag != "gdkvm-checkpoint" || version != 1) throw FormatError(path.string() + ".manifest: not a checkpoint manifest");
  Checkpoint ck;
  std::size_t count = 0;
  std::string key, value;
  while (man >> key) {
    if (key == "tensors") {
      man >> count;
      break;
    }
    man >> value;
    if (key == "step") ck.step = std::stoull(value);
    else if (key == "key_dim") ck.config.key_dim = std::stoull(value);
    else if (key == "value_dim") ck.config.value_dim = std::stoull(value);
    else if (key == "hidden") ck.config.hidden = std::stoull(value);
    else if (key == "decoder_hidden") ck.config.decoder_hidden = std::stoull(value);
    else if (key == "strategy") {
      const auto s = parse_strategy(value);
      if (!s) throw FormatError("checkpoint manifest: unknown strategy " + value);
      ck.config.strategy = *s;
    } else if (key == "kpff") ck.config.kpff = value == "on";
    else if (key == "normalize") ck.config.normalize = value == "on";
    else throw FormatError("checkpoint manifest: unknown key " + key);
  }
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  const ParameterSet<float> reference = init_parameters<float>(ck.config, 0);
  if (count != reference.size()) throw FormatError("checkpoint: expected " + std::to_string(reference.size()) + " tensors");
  for (std::size_t i = 0; i < count; ++i) {
    std::string name, shape;
    man >> name >> shape;
    Tensor t = read_f32_tensor(is);
    if (name != reference[i].name || t.shape() != reference[i].value.shape()) {
      throw FormatError("checkpoint: tensor " + std::to_string(i) + " is " + name + " " + shape_string(t.shape()) +
                        ", expected " + reference[i].name + " " + shape_string(reference[i].value.shape()));
    }
    ck.params.push_back({name, std::move(t)});
  }
  return ck;
}

template ParameterSet<float> init_parameters(const ModelConfig&, std::uint64_t);
template ParameterSet<double> init_parameters(const ModelConfig&, std::uint64_t);
template std::vector<ad::Var<float>> bind_parameters(ad::Tape<float>&, const ParameterSet<float>&);
template std::vector<ad::Var<double>> bind_parameters(ad::Tape<double>&, const ParameterSet<double>&);
template ForwardTrace<float> forward(ad::Tape<float>&, const std::vector<ad::Var<float>>&, const ModelConfig&,
                                     const Tensor&, const Tensor&);
template ForwardTrace<double> forward(ad::Tape<double>&, const std::vector<ad::Var<double>>&, const ModelConfig&,
                                      const Tensor64&, const Tensor64&);
template ad::Var<float> sequence_loss(const std::vector<ad::Var<float>>&, const std::vector<Tensor>&,
                                      const std::vector<std::size_t>&);
template ad::Var<double> sequence_loss(const std::vector<ad::Var<double>>&, const std::vector<Tensor64>&,
                                       const std::vector<std::size_t>&);

}  // namespace gdkvm
