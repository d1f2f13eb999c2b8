#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "gdkvm/gradcheck.hpp"
#include "gdkvm/memory_rules.hpp"
#include "gdkvm/model.hpp"
#include "gdkvm/optim.hpp"
#include "gdkvm/seg_metrics.hpp"
#include "gdkvm/synthetic.hpp"

namespace gdkvm {

struct TrainConfig {
  SyntheticSpec data;                 // base spec; each video is sample_spec() of it
  ModelConfig model;
  std::size_t steps = 300;
  std::size_t batch = 4;
  AdamWConfig optimizer{2e-3, 1e-2};
  double clip = 3.0;
  bool augment = true;
  std::size_t eval_every = 0;         // 0: evaluate only at the end
  std::size_t eval_videos = 16;
  std::uint64_t eval_seed = 20240;    // the benchmark set is fixed across training seeds
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};  // ablation replicates
};

struct StepLog {
  std::size_t step;
  double loss;
  double grad_norm;   // before clipping
  double alpha;       // gates averaged over the batch's writes
  double beta;
};

struct EvalLog {
  std::size_t step;
  MeanScores scores;
};

struct TrainResult {
  ParameterSet<float> params;
  std::vector<StepLog> steps;
  std::vector<EvalLog> evals;
  std::vector<GateSample> gates;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<Video> benchmark_videos(const TrainConfig& cfg);

// Deterministic in cfg. Throws DivergenceError when the loss or a gradient
// becomes non-finite.
TrainResult train(const TrainConfig& cfg, const std::function<void(const StepLog&)>& on_step = {});

// Scores frames 1..T-1 of every video (frame 0's mask is given).
std::vector<FrameScores> evaluate(const ParameterSet<float>& params, const ModelConfig& model,
                                  const std::vector<Video>& videos);

void write_train_log_csv(std::ostream& os, const TrainResult& r);

struct AblationVariant {
  std::string name;
  UpdateStrategy strategy;
  bool kpff;
};

std::vector<AblationVariant> ablation_variants();

struct AblationRun {
  std::string variant;
  std::uint64_t seed;
  MeanScores scores;
  double final_loss;
};

struct AblationSummary {
  std::string variant;
  MeanScores mean;          // averaged over seeds
  double dice_std = 0;      // across seeds
};

struct AblationResult {
  std::vector<AblationRun> runs;
  std::vector<AblationSummary> summary;
  const AblationSummary& find(const std::string& variant) const;
};

// Every variant is trained once per seed with identical data and budgets.
// Runs are spread over `threads` workers (0: GDKVM_THREADS, else the
// hardware concurrency); results do not depend on the thread count.
AblationResult ablation_suite(const TrainConfig& cfg, std::size_t threads = 0);

void write_ablation_csv(std::ostream& os, const AblationResult& r);

std::size_t thread_count_from_env();

// Central-difference check of every parameter of a reduced toy model
// (C = 4, 16 x 16, T = 3) in 64-bit, with full key-norm gradients and
// randomised gate weights so every path carries signal.
GradCheckReport model_gradcheck(UpdateStrategy strategy, bool normalize, bool kpff, std::uint64_t seed);

}  // namespace gdkvm
