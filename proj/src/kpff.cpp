#include "gdkvm/kpff.hpp"

#include "gdkvm/ops.hpp"

namespace gdkvm {

template <typename T>
KpffOutput<T> kpff_fuse_detailed(const FeatureMaps<T>& maps) {
  if (maps.f_key.rank() != 3) throw DimensionError("kpff: F_K must be H x W x C");
  require_same_shape(maps.f_key.shape(), maps.f_pix.shape(), "kpff F_Pix");
  const std::size_t h = maps.f_key.dim(0), w = maps.f_key.dim(1), c = maps.f_key.dim(2);
  if (maps.gate_weight.shape() != Shape{3, 3, c, c}) {
    throw DimensionError("kpff: gate weight must be 3x3x" + std::to_string(c) + "x" + std::to_string(c));
  }

  const BasicTensor<T> global = expand_spatial(gap_spatial(maps.f_key), h, w);
  BasicTensor<T> local(maps.f_key.shape());
  for (std::size_t i = 0; i < local.size(); ++i) local[i] = maps.f_key[i] + global[i];

  BasicTensor<T> gate = sigmoid(conv2d(local, maps.gate_weight, maps.gate_bias));
  BasicTensor<T> fused(local.shape());
  for (std::size_t i = 0; i < fused.size(); ++i) {
    fused[i] = gate[i] * local[i] + (T{1} - gate[i]) * maps.f_pix[i];
  }
  return {std::move(fused), std::move(gate), std::move(local)};
}

template KpffOutput<float> kpff_fuse_detailed(const FeatureMaps<float>&);
template KpffOutput<double> kpff_fuse_detailed(const FeatureMaps<double>&);

}  // namespace gdkvm
