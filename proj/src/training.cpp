#include "gdkvm/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <ostream>
#include <thread>

#include "gdkvm/csv.hpp"

namespace gdkvm {

namespace {

Tensor mask_tensor(const MaskGrid& m) {
  return m.to_tensor().cast<float>().reshaped({m.height(), m.width(), 1});
}

void validate(const TrainConfig& cfg) {
  if (cfg.batch == 0) throw std::invalid_argument("train: batch must be >= 1");
  if (!(cfg.clip > 0)) throw std::invalid_argument("train: clip must be positive");
  if (!(cfg.optimizer.lr > 0)) throw std::invalid_argument("train: lr must be positive");
  if (cfg.data.size % kFeatureStride) throw std::invalid_argument("train: size must be a multiple of 4");
  cfg.data.validate();
}

}  // namespace

std::vector<Video> benchmark_videos(const TrainConfig& cfg) {
  Rng rng(cfg.eval_seed, 7);
  std::vector<Video> out;
  for (std::size_t i = 0; i < cfg.eval_videos; ++i) out.push_back(generate(sample_spec(cfg.data, rng)));
  return out;
}

std::vector<FrameScores> evaluate(const ParameterSet<float>& params, const ModelConfig& model,
                                  const std::vector<Video>& videos) {
  std::vector<FrameScores> rows;
  for (std::size_t i = 0; i < videos.size(); ++i) {
    const Video& v = videos[i];
    const std::vector<MaskGrid> pred = predict(params, model, v.frames, v.masks[0]);
    for (std::size_t t = 1; t < v.length(); ++t) {
      rows.push_back(score_frame("v" + std::to_string(i), t, pred[t], v.masks[t]));
    }
  }
  return rows;
}

TrainResult train(const TrainConfig& cfg, const std::function<void(const StepLog&)>& on_step) {
  validate(cfg);
  TrainResult result;
  result.params = init_parameters<float>(cfg.model, cfg.seed);
  AdamW<float> opt(result.params, cfg.optimizer);
  Rng data_rng(cfg.seed, 1);
  Rng aug_rng(cfg.seed, 2);
  const std::vector<Video> bench = benchmark_videos(cfg);

  auto run_eval = [&](std::size_t step) {
    if (bench.empty()) return;
    result.evals.push_back({step, mean_scores(evaluate(result.params, cfg.model, bench))});
  };

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<Tensor> grads;
    for (const auto& p : result.params) grads.emplace_back(p.value.shape());
    double loss_sum = 0, alpha_sum = 0, beta_sum = 0;
    std::size_t writes = 0;
    const float inv_batch = 1.0f / static_cast<float>(cfg.batch);

    for (std::size_t b = 0; b < cfg.batch; ++b) {
      Video video = generate(sample_spec(cfg.data, data_rng));
      if (cfg.augment) video = augment(video, aug_rng);
      ad::Tape<float> tape;
      const auto vars = bind_parameters(tape, result.params);
      const ForwardTrace<float> trace = forward(tape, vars, cfg.model, video.frames, mask_tensor(video.masks[0]));
      std::vector<Tensor> truth;
      for (const auto& m : video.masks) truth.push_back(mask_tensor(m));
      const ad::Var<float> loss = sequence_loss(trace.logits, truth, default_supervision(video.length()));
      tape.backward(loss);
      for (std::size_t i = 0; i < vars.size(); ++i) {
        if (!tape.has_grad(vars[i].id)) continue;
        const Tensor& g = tape.grad(vars[i].id);
        for (std::size_t j = 0; j < g.size(); ++j) grads[i][j] += g[j] * inv_batch;
      }
      loss_sum += loss.value()[0];
      for (std::size_t w = 0; w < trace.alpha.size(); ++w) {
        alpha_sum += trace.alpha[w].value()[0];
        beta_sum += trace.beta[w].value()[0];
        ++writes;
      }
    }

    const double loss = loss_sum / static_cast<double>(cfg.batch);
    const double norm = clip_global_norm(grads, cfg.clip);
    if (!std::isfinite(loss) || !std::isfinite(norm)) {
      throw DivergenceError("training diverged at step " + std::to_string(step) + ": loss=" + format_number(loss) +
                            " grad_norm=" + format_number(norm));
    }
    opt.step(result.params, grads);
    const StepLog log{step, loss, norm, writes ? alpha_sum / static_cast<double>(writes) : 0.0,
                      writes ? beta_sum / static_cast<double>(writes) : 0.0};
    result.steps.push_back(log);
    result.gates.push_back({step, log.alpha, log.beta});
    if (on_step) on_step(log);
    if (cfg.eval_every && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps) run_eval(step + 1);
  }
  run_eval(cfg.steps);
  return result;
}

void write_train_log_csv(std::ostream& os, const TrainResult& r) {
  os << "step,loss,grad_norm,alpha,beta\n";
  for (const auto& s : r.steps) {
    os << s.step << ',' << format_number(s.loss) << ',' << format_number(s.grad_norm) << ',' << format_number(s.alpha)
       << ',' << format_number(s.beta) << '\n';
  }
}

std::vector<AblationVariant> ablation_variants() {
  std::vector<AblationVariant> v;
  for (UpdateStrategy s : kAllStrategies) v.push_back({std::string(strategy_name(s)), s, true});
  v.push_back({"gdr-kpff-off", UpdateStrategy::kGDR, false});
  return v;
}

const AblationSummary& AblationResult::find(const std::string& variant) const {
  for (const auto& s : summary) {
    if (s.variant == variant) return s;
  }
  throw std::out_of_range("ablation result has no variant " + variant);
}

std::size_t thread_count_from_env() {
  if (const char* env = std::getenv("GDKVM_THREADS")) {
    char* end = nullptr;
    const unsigned long n = std::strtoul(env, &end, 10);
    if (end != env && *end == '\0' && n > 0) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

AblationResult ablation_suite(const TrainConfig& cfg, std::size_t threads) {
  if (cfg.seeds.empty()) throw std::invalid_argument("ablation_suite: no seeds");
  const std::vector<AblationVariant> variants = ablation_variants();
  struct Job {
    AblationVariant variant;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto& v : variants) {
    for (std::uint64_t s : cfg.seeds) jobs.push_back({v, s});
  }
  AblationResult result;
  result.runs.resize(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        TrainConfig c = cfg;
        c.seed = jobs[i].seed;
        c.model.strategy = jobs[i].variant.strategy;
        c.model.kpff = jobs[i].variant.kpff;
        c.eval_every = 0;
        const TrainResult r = train(c);
        result.runs[i] = {jobs[i].variant.name, jobs[i].seed, r.evals.back().scores,
                          r.steps.empty() ? std::nan("") : r.steps.back().loss};
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::min(threads ? threads : thread_count_from_env(), jobs.size());
  if (n <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  for (const auto& v : variants) {
    AblationSummary s{v.name, {}, 0};
    std::vector<double> dice;
    for (const auto& r : result.runs) {
      if (r.variant != v.name) continue;
      s.mean.dice += r.scores.dice;
      s.mean.iou += r.scores.iou;
      s.mean.hd += r.scores.hd;
      s.mean.asd += r.scores.asd;
      dice.push_back(r.scores.dice);
    }
    const double k = static_cast<double>(dice.size());
    s.mean.dice /= k;
    s.mean.iou /= k;
    s.mean.hd /= k;
    s.mean.asd /= k;
    s.mean.count = dice.size();
    double var = 0;
    for (double d : dice) var += (d - s.mean.dice) * (d - s.mean.dice);
    s.dice_std = dice.size() > 1 ? std::sqrt(var / (k - 1)) : 0.0;
    result.summary.push_back(s);
  }
  return result;
}

void write_ablation_csv(std::ostream& os, const AblationResult& r) {
  os << "variant,seed,dice,iou,hd,asd,final_loss\n";
  for (const auto& run : r.runs) {
    os << run.variant << ',' << run.seed << ',' << format_number(run.scores.dice) << ','
       << format_number(run.scores.iou) << ',' << format_number(run.scores.hd) << ',' << format_number(run.scores.asd)
       << ',' << format_number(run.final_loss) << '\n';
  }
  for (const auto& s : r.summary) {
    os << s.variant << ",mean," << format_number(s.mean.dice) << ',' << format_number(s.mean.iou) << ','
       << format_number(s.mean.hd) << ',' << format_number(s.mean.asd) << ",\n";
  }
}

GradCheckReport model_gradcheck(UpdateStrategy strategy, bool normalize, bool kpff, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.key_dim = cfg.value_dim = cfg.hidden = cfg.decoder_hidden = 4;
  cfg.strategy = strategy;
  cfg.normalize = normalize;
  cfg.kpff = kpff;
  cfg.full_norm_gradient = true;

  SyntheticSpec spec;
  spec.frames = 3;
  spec.size = 16;
  spec.axis_a = 4.5;
  spec.axis_b = 3.0;
  spec.center_x = spec.center_y = 7.5;
  spec.period = 3.0;
  spec.seed = seed;
  const Video video = generate(spec);
  const Tensor64 frames = video.frames.cast<double>();
  std::vector<Tensor64> truth;
  for (const auto& m : video.masks) truth.push_back(m.to_tensor().cast<double>().reshaped({16, 16, 1}));

  ParameterSet<double> params = init_parameters<double>(cfg, seed);
  Rng rng(seed, 0x6c);
  for (auto& p : params) {
    const bool gate_weight = p.name == "gate.w_alpha" || p.name == "gate.w_beta";
    const bool bias = p.name.ends_with(".b");
    if (!gate_weight && !bias) continue;
    for (auto& v : p.value.data()) v = rng.normal() * (gate_weight ? 0.5 : 0.1);
  }
  const auto supervised = default_supervision(frames.dim(0));
  return finite_difference_check(params, [&](ad::Tape<double>& tape, const std::vector<ad::Var<double>>& vars) {
    const ForwardTrace<double> trace = forward(tape, vars, cfg, frames, truth[0]);
    return sequence_loss(trace.logits, truth, supervised);
  });
}

}  // namespace gdkvm
