#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "gdkvm/autograd.hpp"
#include "gdkvm/memory_rules.hpp"
#include "gdkvm/optim.hpp"
#include "gdkvm/seg_metrics.hpp"

namespace gdkvm {

struct ModelConfig {
  std::size_t key_dim = 16;       // C_k
  std::size_t value_dim = 16;     // C_v
  std::size_t hidden = 16;        // encoder width
  std::size_t decoder_hidden = 8;
  UpdateStrategy strategy = UpdateStrategy::kGDR;
  bool kpff = true;               // off: keys come straight from the key encoder
  bool normalize = false;         // divide the readout by Z phi(q)
  bool full_norm_gradient = false;
};

// Feature maps are 1/4 of the input resolution; H and W must divide by 4.
inline constexpr std::size_t kFeatureStride = 4;

// Parameters in a fixed order:
//   key.conv1.{w,b} key.conv2.{w,b} pix.{w,b} kpff.{w,b}
//   gate.{w_alpha,w_beta,b_alpha,b_beta}
//   value.conv1.{w,b} value.conv2.{w,b} dec.conv1.{w,b} dec.conv2.{w,b}
template <typename T>
ParameterSet<T> init_parameters(const ModelConfig& cfg, std::uint64_t seed);

template <typename T>
struct ForwardTrace {
  std::vector<ad::Var<T>> logits;  // per frame, H x W x 1
  std::vector<ad::Var<T>> alpha;   // gates used for each write ({1})
  std::vector<ad::Var<T>> beta;
  ad::Var<T> state;                // memory after the last write
};

// Frame 0 writes the given first mask into memory and reads it back; each
// later frame reads the memory, then writes its own frame together with
// sigmoid(logits) as the mask. Gates come from the memory state before each
// write. frames: T x H x W x 1; first_mask: H x W x 1.
template <typename T>
ForwardTrace<T> forward(ad::Tape<T>& tape, const std::vector<ad::Var<T>>& params, const ModelConfig& cfg,
                        const BasicTensor<T>& frames, const BasicTensor<T>& first_mask);

// Mean over `supervised` of (BCE + soft dice) / 2. truth[t] is H x W x 1.
// std::invalid_argument for an empty set or an out-of-range frame.
template <typename T>
ad::Var<T> sequence_loss(const std::vector<ad::Var<T>>& logits, const std::vector<BasicTensor<T>>& truth,
                         const std::vector<std::size_t>& supervised);

// {0, T - 1} (just {0} for T = 1).
std::vector<std::size_t> default_supervision(std::size_t frames);

// Inference without gradients; returns the predicted mask of each frame.
std::vector<MaskGrid> predict(const ParameterSet<float>& params, const ModelConfig& cfg, const Tensor& frames,
                              const MaskGrid& first_mask);

template <typename T>
std::vector<ad::Var<T>> bind_parameters(ad::Tape<T>& tape, const ParameterSet<T>& params);

// Checkpoint: <path> holds the tensors as concatenated GDKV-T records, and
// <path>.manifest lists the model config then one "name shape" line each.
void save_checkpoint(const std::filesystem::path& path, const ParameterSet<float>& params, const ModelConfig& cfg,
                     std::size_t step);
struct Checkpoint {
  ParameterSet<float> params;
  ModelConfig config;
  std::size_t step = 0;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace gdkvm
