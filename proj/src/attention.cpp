#include "gdkvm/attention.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "gdkvm/kernels.hpp"
#include "gdkvm/ops.hpp"
#include "gdkvm/rng.hpp"

namespace gdkvm {

template <typename T>
void QKVSequence<T>::validate() const {
  if (keys.empty()) throw DimensionError("QKVSequence: at least one frame required");
  if (queries.size() != keys.size() || values.size() != keys.size()) {
    throw DimensionError("QKVSequence: queries, keys and values must have the same frame count");
  }
  const Shape kshape = keys.front().shape();
  const Shape vshape = values.front().shape();
  if (kshape.size() != 2 || vshape.size() != 2 || kshape[0] != vshape[0]) {
    throw DimensionError("QKVSequence: keys must be HW x Ck and values HW x Cv");
  }
  for (std::size_t f = 0; f < keys.size(); ++f) {
    require_same_shape(queries[f].shape(), kshape, "QKVSequence queries");
    require_same_shape(keys[f].shape(), kshape, "QKVSequence keys");
    require_same_shape(values[f].shape(), vshape, "QKVSequence values");
  }
}

template <typename T>
MemoryState<T> MemoryState<T>::zeros(std::size_t value_dim, std::size_t key_dim, bool with_normalizer) {
  MemoryState s{BasicTensor<T>({value_dim, key_dim}), std::nullopt, 0};
  if (with_normalizer) s.Z = BasicTensor<T>({key_dim});
  return s;
}

namespace {

template <typename T>
void check_frame_index(const QKVSequence<T>& seq, std::size_t t) {
  seq.validate();
  if (t < 1 || t > seq.frames()) {
    throw DimensionError("frame index " + std::to_string(t) + " outside 1.." + std::to_string(seq.frames()));
  }
}

}  // namespace

template <typename T>
BasicTensor<T> softmax_matching(const QKVSequence<T>& seq, std::size_t t) {
  check_frame_index(seq, t);
  const std::size_t hw = seq.pixels(), ck = seq.key_dim(), cv = seq.value_dim();
  BasicTensor<T> all_keys({t * hw, ck});
  BasicTensor<T> all_values({t * hw, cv});
  for (std::size_t i = 0; i < t; ++i) {
    std::copy_n(seq.keys[i].ptr(), hw * ck, all_keys.ptr() + i * hw * ck);
    std::copy_n(seq.values[i].ptr(), hw * cv, all_values.ptr() + i * hw * cv);
  }
  const auto& K = kernels::active<T>();
  BasicTensor<T> scores({hw, t * hw});
  K.gemm_nt(hw, t * hw, ck, seq.queries[t - 1].ptr(), all_keys.ptr(), scores.ptr(), false);
  const BasicTensor<T> weights = softmax_rows(scores);
  BasicTensor<T> out({hw, cv});
  K.gemm_nn(hw, cv, t * hw, weights.ptr(), all_values.ptr(), out.ptr(), false);
  return out;
}

template <typename T>
BasicTensor<T> linear_matching_parallel(const QKVSequence<T>& seq, std::size_t t, MatchingKernel kernel) {
  check_frame_index(seq, t);
  const std::size_t hw = seq.pixels(), ck = seq.key_dim(), cv = seq.value_dim();
  const auto& K = kernels::active<T>();

  std::vector<BasicTensor<T>> mapped_keys;
  BasicTensor<T> mapped_query = seq.queries[t - 1];
  if (kernel == MatchingKernel::kPhi) {
    mapped_query = phi_kernel(seq.queries[t - 1]);
    for (std::size_t i = 0; i < t; ++i) mapped_keys.push_back(phi_kernel(seq.keys[i]));
  } else {
    mapped_keys.assign(seq.keys.begin(), seq.keys.begin() + static_cast<std::ptrdiff_t>(t));
  }

  BasicTensor<T> out({hw, cv});
  for (std::size_t p = 0; p < hw; ++p) {
    const T* q = mapped_query.ptr() + p * ck;
    T* o = out.ptr() + p * cv;
    T denominator = 0;
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t r = 0; r < hw; ++r) {
        const T d = K.dot(mapped_keys[i].ptr() + r * ck, q, ck);
        const T w = kernel == MatchingKernel::kPhi ? d : std::exp(d);
        denominator += w;
        K.axpy(w, seq.values[i].ptr() + r * cv, o, cv);
      }
    }
    if (!(denominator > T{0}) || !std::isfinite(denominator)) {
      throw DegenerateError("linear_matching_parallel: normalizer is not positive at pixel " + std::to_string(p));
    }
    for (std::size_t c = 0; c < cv; ++c) o[c] /= denominator;
  }
  return out;
}

template <typename T>
std::pair<MemoryState<T>, BasicTensor<T>> linear_matching_recurrent(const MemoryState<T>& state,
                                                                   const BasicTensor<T>& keys,
                                                                   const BasicTensor<T>& values,
                                                                   const BasicTensor<T>& queries, bool normalize) {
  if (state.S.rank() != 2 || keys.rank() != 2 || values.rank() != 2 || queries.rank() != 2) {
    throw DimensionError("linear_matching_recurrent: rank-2 operands required");
  }
  const std::size_t cv = state.S.dim(0), ck = state.S.dim(1);
  const std::size_t hw = keys.dim(0);
  if (keys.dim(1) != ck || queries.dim(1) != ck || values.dim(1) != cv || values.dim(0) != hw) {
    throw DimensionError("linear_matching_recurrent: frame tensors do not match state " +
                         shape_string(state.S.shape()));
  }
  if (state.Z && state.Z->shape() != Shape{ck}) throw DimensionError("linear_matching_recurrent: Z must have Ck entries");

  const auto& K = kernels::active<T>();
  MemoryState<T> next = state;
  next.frame_index = state.frame_index + 1;
  const BasicTensor<T> phi_k = phi_kernel(keys);
  K.gemm_tn(cv, ck, hw, values.ptr(), phi_k.ptr(), next.S.ptr(), true);
  if (normalize || next.Z) {
    if (!next.Z) {
      // A state that never tracked Z can only be normalized from frame 0.
      if (state.frame_index != 0) {
        throw DimensionError("linear_matching_recurrent: normalizer requested on a state without Z");
      }
      next.Z = BasicTensor<T>({ck});
    }
    T* z = next.Z->ptr();
    for (std::size_t p = 0; p < hw; ++p) K.axpy(T{1}, phi_k.ptr() + p * ck, z, ck);
  }

  const BasicTensor<T> phi_q = phi_kernel(queries);
  BasicTensor<T> out({queries.dim(0), cv});
  K.gemm_nt(queries.dim(0), cv, ck, phi_q.ptr(), next.S.ptr(), out.ptr(), false);
  if (normalize) {
    for (std::size_t p = 0; p < queries.dim(0); ++p) {
      const T denominator = K.dot(next.Z->ptr(), phi_q.ptr() + p * ck, ck);
      if (!(denominator > T{0})) {
        throw DegenerateError("linear_matching_recurrent: normalizer is not positive at pixel " + std::to_string(p));
      }
      for (std::size_t c = 0; c < cv; ++c) out[p * cv + c] /= denominator;
    }
  }
  return {std::move(next), std::move(out)};
}

template <typename T>
QKVSequence<T> random_sequence(std::size_t frames, std::size_t pixels, std::size_t key_dim, std::size_t value_dim,
                               std::uint64_t seed) {
  Rng rng(seed);
  auto draw = [&rng](std::size_t rows, std::size_t cols) {
    BasicTensor<T> t({rows, cols});
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-1.0, 1.0));
    return t;
  };
  QKVSequence<T> seq;
  for (std::size_t f = 0; f < frames; ++f) {
    seq.queries.push_back(draw(pixels, key_dim));
    seq.keys.push_back(draw(pixels, key_dim));
    seq.values.push_back(draw(pixels, value_dim));
  }
  return seq;
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  if (n < 2 || y.size() != n) throw DimensionError("loglog_slope: need at least two paired points");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0) throw DegenerateError("loglog_slope: all lengths are equal");
  return sxy / sxx;
}

namespace {

// Best-of-three mean time per call, each trial running for at least `budget`.
template <typename Fn>
double time_call(Fn&& fn, double budget_seconds = 0.03) {
  using clock = std::chrono::steady_clock;
  double best = 1e300;
  for (int trial = 0; trial < 3; ++trial) {
    std::size_t reps = 0;
    const auto start = clock::now();
    double elapsed = 0;
    do {
      fn();
      ++reps;
      elapsed = std::chrono::duration<double>(clock::now() - start).count();
    } while (elapsed < budget_seconds);
    best = std::min(best, elapsed / static_cast<double>(reps));
  }
  return best;
}

}  // namespace

ScalingReport measure_scaling(const std::vector<std::size_t>& lengths, std::size_t pixels, std::size_t key_dim,
                              std::size_t value_dim, std::uint64_t seed) {
  ScalingReport report{};
  std::vector<double> xs, soft, rec;
  volatile float sink = 0;
  for (std::size_t frames : lengths) {
    const auto seq = random_sequence<float>(frames, pixels, key_dim, value_dim, seed + frames);
    const double t_soft = time_call([&] {
      for (std::size_t t = 1; t <= frames; ++t) sink = sink + softmax_matching(seq, t)[0];
    });
    const double t_rec = time_call([&] {
      auto state = MemoryState<float>::zeros(value_dim, key_dim);
      for (std::size_t t = 0; t < frames; ++t) {
        auto [next, out] = linear_matching_recurrent(state, seq.keys[t], seq.values[t], seq.queries[t], false);
        state = std::move(next);
        sink = sink + out[0];
      }
    });
    report.rows.push_back({frames, t_soft, t_rec});
    xs.push_back(static_cast<double>(frames));
    soft.push_back(t_soft);
    rec.push_back(t_rec);
  }
  report.softmax_slope = loglog_slope(xs, soft);
  report.recurrent_slope = loglog_slope(xs, rec);
  return report;
}

EquivalenceReport check_equivalence(std::size_t trials, std::uint64_t seed, std::size_t max_frames,
                                    std::size_t max_pixels, std::size_t max_dim) {
  EquivalenceReport report;
  Rng rng(seed, 0xe9);
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const std::size_t frames = 1 + rng.below(max_frames);
    const std::size_t pixels = 1 + rng.below(max_pixels);
    const std::size_t ck = 1 + rng.below(max_dim);
    const std::size_t cv = 1 + rng.below(max_dim);
    const auto seq = random_sequence<float>(frames, pixels, ck, cv, rng.next_u64());
    auto state = MemoryState<float>::zeros(cv, ck, true);
    for (std::size_t t = 0; t < frames; ++t) {
      auto [next, out] = linear_matching_recurrent(state, seq.keys[t], seq.values[t], seq.queries[t], true);
      state = std::move(next);
      const auto ref = linear_matching_parallel(seq, t + 1);
      for (std::size_t i = 0; i < out.size(); ++i) {
        report.max_abs_deviation = std::max(report.max_abs_deviation, static_cast<double>(std::abs(out[i] - ref[i])));
      }
      ++report.outputs;
    }
    ++report.trials;
  }
  return report;
}

#define GDKVM_INSTANTIATE_ATTENTION(T)                                                                           \
  template struct QKVSequence<T>;                                                                                \
  template struct MemoryState<T>;                                                                                \
  template BasicTensor<T> softmax_matching(const QKVSequence<T>&, std::size_t);                                  \
  template BasicTensor<T> linear_matching_parallel(const QKVSequence<T>&, std::size_t, MatchingKernel);          \
  template std::pair<MemoryState<T>, BasicTensor<T>> linear_matching_recurrent(                                  \
      const MemoryState<T>&, const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, bool);         \
  template QKVSequence<T> random_sequence(std::size_t, std::size_t, std::size_t, std::size_t, std::uint64_t);

GDKVM_INSTANTIATE_ATTENTION(float)
GDKVM_INSTANTIATE_ATTENTION(double)

#undef GDKVM_INSTANTIATE_ATTENTION

}  // namespace gdkvm
