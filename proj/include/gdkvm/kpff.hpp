#pragma once

#include "gdkvm/tensor.hpp"

namespace gdkvm {

// Inputs of the key-pixel fusion: local key features, pixel-level features
// (same H x W x C) and the 3x3 C->C gate convolution.
template <typename T>
struct FeatureMaps {
  BasicTensor<T> f_key;
  BasicTensor<T> f_pix;
  BasicTensor<T> gate_weight;  // 3 x 3 x C x C
  BasicTensor<T> gate_bias;    // C
};

template <typename T>
struct KpffOutput {
  BasicTensor<T> fused;
  BasicTensor<T> gate;    // G, strictly inside (0, 1)
  BasicTensor<T> local;   // F_K + F_Global
};

// F_Global = expand(gap(F_K)); G = sigmoid(conv(F_K + F_Global));
// fused = G * (F_K + F_Global) + (1 - G) * F_Pix.
template <typename T>
KpffOutput<T> kpff_fuse_detailed(const FeatureMaps<T>& maps);

template <typename T>
BasicTensor<T> kpff_fuse(const FeatureMaps<T>& maps) {
  return kpff_fuse_detailed(maps).fused;
}

}  // namespace gdkvm
