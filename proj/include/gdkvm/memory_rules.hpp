#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string_view>
#include <vector>

#include "gdkvm/attention.hpp"
#include "gdkvm/tensor.hpp"

// State-update policies for the matrix memory: the delta rule, the gated
// delta rule, and the ablation variants, plus the gate projection that
// drives them.
namespace gdkvm {

// Decay (alpha) and write strength (beta), both strictly inside (0, 1).
template <typename T>
struct GateValues {
  T alpha;
  T beta;
};

// alpha = sigmoid(w_alpha . s + b_alpha), beta likewise, where s is the
// state summary (row means of S followed by column means, length Cv + Ck).
template <typename T>
struct GateProjection {
  BasicTensor<T> w_alpha;
  BasicTensor<T> w_beta;
  T b_alpha = 0;
  T b_beta = 0;

  // Zero weights; biases give alpha ~ 0.95 (slow forgetting) and beta = 0.5.
  static GateProjection initial(std::size_t value_dim, std::size_t key_dim);
};

inline constexpr double kInitialAlpha = 0.95;
inline constexpr double kInitialBeta = 0.5;

enum class UpdateStrategy { kBaseline, kSanityCheck, kNoAlpha, kNoBeta, kGDR };

inline constexpr UpdateStrategy kAllStrategies[] = {UpdateStrategy::kBaseline, UpdateStrategy::kSanityCheck,
                                                    UpdateStrategy::kNoAlpha, UpdateStrategy::kNoBeta,
                                                    UpdateStrategy::kGDR};

// CLI spelling: baseline, sanity, noalpha, nobeta, gdr.
std::string_view strategy_name(UpdateStrategy s);
std::optional<UpdateStrategy> parse_strategy(std::string_view name);

// Every strategy is S' = decay * (S - erase * (S k) k^T) + write * v k^T.
template <typename T>
struct UpdateCoefficients {
  T decay;
  T erase;
  T write;
};

template <typename T>
UpdateCoefficients<T> strategy_coefficients(UpdateStrategy s, const GateValues<T>& gates);

// Row means of S followed by column means.
template <typename T>
BasicTensor<T> state_summary(const BasicTensor<T>& S);

template <typename T>
GateValues<T> project_gates(const GateProjection<T>& proj, const MemoryState<T>& state);

// k / |k|; throws DegenerateError for a zero key.
template <typename T>
BasicTensor<T> normalize_key(const BasicTensor<T>& k);

// S <- S (I - beta k k^T) + beta v k^T with k normalized first.
template <typename T>
MemoryState<T> delta_rule_step(const MemoryState<T>& state, const BasicTensor<T>& k, const BasicTensor<T>& v,
                               T beta);

// S <- alpha S (I - beta k k^T) + beta v k^T with k normalized first.
template <typename T>
MemoryState<T> gdr_step(const MemoryState<T>& state, const BasicTensor<T>& k, const BasicTensor<T>& v,
                        const GateValues<T>& gates);

template <typename T>
MemoryState<T> apply_strategy(UpdateStrategy strategy, const MemoryState<T>& state, const BasicTensor<T>& k,
                              const BasicTensor<T>& v, const GateValues<T>& gates);

// Per-pixel S phi(q_p) for q [HW x Ck]; returns [HW x Cv].
template <typename T>
BasicTensor<T> readout(const MemoryState<T>& state, const BasicTensor<T>& q);

// One row of a gate trace: the gates observed at a training step.
struct GateSample {
  std::size_t step;
  double alpha;
  double beta;
};

struct Histogram {
  double lower;
  double upper;
  std::vector<std::size_t> counts;

  std::size_t occupied_bins() const;
  std::size_t bin_of(double v) const;
};

inline constexpr std::size_t kGateHistogramBins = 64;

struct GateStatistics {
  Histogram alpha;        // over [0, 1]
  Histogram beta;         // over [0, 1]
  Histogram grad_alpha;   // step-to-step differences over [-1, 1]; empty for one-sample traces
  Histogram grad_beta;
  std::size_t gradient_count = 0;
  // Pearson r of the two difference streams; absent when undefined.
  std::optional<double> grad_correlation;
};

// Throws std::invalid_argument for an empty trace.
GateStatistics gate_statistics(const std::vector<GateSample>& trace);

// Trace CSV: step,alpha,beta,grad_alpha,grad_beta (gradients blank on row 0).
void write_gate_trace_csv(std::ostream& os, const std::vector<GateSample>& trace);
std::vector<GateSample> read_gate_trace_csv(std::istream& is);

// series,bin,lower,upper,count rows, then a grad_pearson row.
void write_gate_statistics_csv(std::ostream& os, const GateStatistics& stats);

}  // namespace gdkvm
