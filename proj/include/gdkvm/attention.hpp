#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "gdkvm/tensor.hpp"

// Memory matching over a video: quadratic softmax matching, linear matching
// by explicit summation over history, and the equivalent recurrent form that
// carries a fixed-size matrix state.
namespace gdkvm {

// Per-frame queries/keys [HW x Ck] and values [HW x Cv].
template <typename T>
struct QKVSequence {
  std::vector<BasicTensor<T>> queries;
  std::vector<BasicTensor<T>> keys;
  std::vector<BasicTensor<T>> values;

  std::size_t frames() const { return keys.size(); }
  std::size_t pixels() const { return keys.front().dim(0); }
  std::size_t key_dim() const { return keys.front().dim(1); }
  std::size_t value_dim() const { return values.front().dim(1); }

  // Throws DimensionError unless all frames share HW, Ck, Cv and T >= 1.
  void validate() const;
};

// S is Cv x Ck. Z (length Ck) is present only when the normalized readout is
// in use.
template <typename T>
struct MemoryState {
  BasicTensor<T> S;
  std::optional<BasicTensor<T>> Z;
  std::size_t frame_index = 0;

  static MemoryState zeros(std::size_t value_dim, std::size_t key_dim, bool with_normalizer = false);
};

// Output for the queries of frame t (1-based) against every key of frames 1..t.
template <typename T>
BasicTensor<T> softmax_matching(const QKVSequence<T>& seq, std::size_t t);

enum class MatchingKernel {
  kPhi,     // phi(k) . phi(q)
  kExpDot,  // exp(k . q); turns linear matching back into softmax matching
};

// Normalized linear matching computed by summing over the full history.
// Throws DegenerateError if a normalizer is not strictly positive.
template <typename T>
BasicTensor<T> linear_matching_parallel(const QKVSequence<T>& seq, std::size_t t,
                                        MatchingKernel kernel = MatchingKernel::kPhi);

// Writes one frame into the state (S += sum_p v_p phi(k_p)^T, Z += sum_p phi(k_p))
// then reads it with the frame's queries: o_p = S phi(q_p), divided by
// Z . phi(q_p) when `normalize` is set. A state without Z gains one when
// normalize is requested.
template <typename T>
std::pair<MemoryState<T>, BasicTensor<T>> linear_matching_recurrent(const MemoryState<T>& state,
                                                                   const BasicTensor<T>& keys,
                                                                   const BasicTensor<T>& values,
                                                                   const BasicTensor<T>& queries, bool normalize);

// Random sequence with entries uniform in [-1, 1].
template <typename T>
QKVSequence<T> random_sequence(std::size_t frames, std::size_t pixels, std::size_t key_dim, std::size_t value_dim,
                               std::uint64_t seed);

struct ScalingRow {
  std::size_t frames;
  double softmax_seconds;
  double recurrent_seconds;
};

struct ScalingReport {
  std::vector<ScalingRow> rows;
  double softmax_slope;    // least-squares slope of log(time) against log(T)
  double recurrent_slope;
};

// Times whole-video processing (one output per frame) for each length.
ScalingReport measure_scaling(const std::vector<std::size_t>& lengths, std::size_t pixels, std::size_t key_dim,
                              std::size_t value_dim, std::uint64_t seed);

struct EquivalenceReport {
  std::size_t trials = 0;
  std::size_t outputs = 0;        // frames compared across all trials
  double max_abs_deviation = 0;
};

// Random 32-bit instances with T in [1, max_frames] and HW in [1, max_pixels]:
// the normalized recurrent readout against the parallel form, frame by frame.
EquivalenceReport check_equivalence(std::size_t trials, std::uint64_t seed, std::size_t max_frames = 16,
                                    std::size_t max_pixels = 64, std::size_t max_dim = 16);

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace gdkvm
