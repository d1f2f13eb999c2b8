#include "gdkvm/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "gdkvm/attention.hpp"
#include "gdkvm/clinical.hpp"
#include "gdkvm/config.hpp"
#include "gdkvm/csv.hpp"
#include "gdkvm/error.hpp"
#include "gdkvm/training.hpp"

namespace gdkvm {

namespace {

namespace fs = std::filesystem;

constexpr double kEquivalenceTolerance = 1e-5;

void with_output(const std::string& path, const std::function<void(std::ostream&)>& fn) {
  if (path.empty()) {
    fn(std::cout);
    std::cout.flush();
    return;
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  fn(os);
  if (!os) throw std::runtime_error("write failed: " + path);
}

std::vector<std::size_t> parse_lengths(const std::string& csv) {
  std::vector<std::size_t> out;
  for (const auto& part : split(csv, ',')) {
    const std::string s(trim(part));
    std::size_t v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size() || v == 0) {
      throw std::invalid_argument("--lengths: '" + s + "' is not a positive integer");
    }
    out.push_back(v);
  }
  if (out.size() < 2) throw std::invalid_argument("--lengths: need at least two lengths for a slope");
  return out;
}

TrainConfig base_config(const std::string& path) { return path.empty() ? TrainConfig{} : load_train_config(path); }

MaskGrid load_mask(const fs::path& path) {
  const StoredTensor t = load_tensor(path);
  if (const auto* b = std::get_if<ByteTensor>(&t)) return MaskGrid::from_tensor(*b);
  return MaskGrid::threshold(std::get<Tensor>(t), 0.5f);
}

double mask_volume(const MaskGrid& m, std::size_t disks) { return simpson_single(extract_disks(m, disks)); }

struct Options {
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out;
  std::string config;
  std::string strategy;
  std::string normalize;
  std::string kpff;
  std::size_t disks = kDefaultDisks;
  std::string lengths = "8,16,32,64,128";
  std::size_t trials = 1000;
  std::size_t steps = 0;
  bool steps_given = false;
  std::size_t pixels = 64;
  std::string checkpoint;
  std::string cases;
  std::vector<std::string> inputs;
};

void apply_model_flags(TrainConfig& cfg, const Options& o) {
  if (!o.strategy.empty()) cfg.model.strategy = *parse_strategy(o.strategy);
  if (!o.normalize.empty()) cfg.model.normalize = parse_bool(o.normalize);
  if (!o.kpff.empty()) cfg.model.kpff = parse_bool(o.kpff);
}

int cmd_gen(const Options& o) {
  if (o.out.empty()) throw std::invalid_argument("gen: --out is required");
  const TrainConfig cfg = base_config(o.config);
  Rng rng(o.seed, 0x6e);
  save_video(o.out, generate(sample_spec(cfg.data, rng)));
  return kExitOk;
}

int cmd_train(const Options& o) {
  if (o.out.empty()) throw std::invalid_argument("train: --out is required");
  TrainConfig cfg = base_config(o.config);
  apply_model_flags(cfg, o);
  if (o.seed_given) cfg.seed = o.seed;
  if (o.steps_given) cfg.steps = o.steps;
  std::cerr << "parameters: " << parameter_count(init_parameters<float>(cfg.model, cfg.seed)) << "\n";
  const TrainResult r = train(cfg, [](const StepLog& s) {
    if (s.step % 25 == 0) std::cerr << "step " << s.step << " loss " << format_number(s.loss) << "\n";
  });
  save_checkpoint(o.out, r.params, cfg.model, cfg.steps);
  with_output(o.out + ".steps.csv", [&](std::ostream& os) { write_train_log_csv(os, r); });
  with_output(o.out + ".gates.csv", [&](std::ostream& os) { write_gate_trace_csv(os, r.gates); });
  with_output(o.out + ".eval.csv", [&](std::ostream& os) {
    os << "step,dice,iou,hd,asd\n";
    for (const auto& e : r.evals) {
      os << e.step << ',' << format_number(e.scores.dice) << ',' << format_number(e.scores.iou) << ','
         << format_number(e.scores.hd) << ',' << format_number(e.scores.asd) << '\n';
    }
  });
  if (!r.evals.empty()) std::cerr << "final mean dice " << format_number(r.evals.back().scores.dice) << "\n";
  return kExitOk;
}

int cmd_eval(const Options& o) {
  if (o.checkpoint.empty()) throw std::invalid_argument("eval: --checkpoint is required");
  const TrainConfig cfg = base_config(o.config);
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  std::vector<Video> videos;
  if (o.inputs.empty()) {
    videos = benchmark_videos(cfg);
  } else {
    for (const auto& p : o.inputs) videos.push_back(load_video(p));
  }
  const auto rows = evaluate(ck.params, ck.config, videos);
  with_output(o.out, [&](std::ostream& os) { write_eval_csv(os, rows); });
  return kExitOk;
}

int cmd_bench(const Options& o) {
  const auto lengths = parse_lengths(o.lengths);
  if (o.pixels == 0) throw std::invalid_argument("bench: --pixels must be >= 1");
  const ScalingReport r = measure_scaling(lengths, o.pixels, 16, 16, o.seed);
  with_output(o.out, [&](std::ostream& os) {
    os << "frames,softmax_seconds,recurrent_seconds\n";
    for (const auto& row : r.rows) {
      os << row.frames << ',' << format_number(row.softmax_seconds) << ',' << format_number(row.recurrent_seconds)
         << '\n';
    }
    os << "slope," << format_number(r.softmax_slope) << ',' << format_number(r.recurrent_slope) << '\n';
  });
  return kExitOk;
}

int cmd_gradcheck(const Options& o) {
  const UpdateStrategy s = o.strategy.empty() ? UpdateStrategy::kGDR : *parse_strategy(o.strategy);
  const bool normalize = !o.normalize.empty() && parse_bool(o.normalize);
  const bool kpff = o.kpff.empty() || parse_bool(o.kpff);
  const GradCheckReport r = model_gradcheck(s, normalize, kpff, o.seed);
  with_output(o.out, [&](std::ostream& os) {
    os << "parameter,checked,max_rel_error,pass\n";
    for (const auto& e : r.entries) {
      os << e.name << ',' << e.checked << ',' << format_number(e.max_rel_error) << ','
         << (e.max_rel_error <= kGradCheckTolerance ? "pass" : "fail") << '\n';
    }
    os << "worst,," << format_number(r.worst()) << ',' << (r.passed(kGradCheckTolerance) ? "pass" : "fail") << '\n';
  });
  return r.passed(kGradCheckTolerance) ? kExitOk : kExitRuntime;
}

int cmd_equiv(const Options& o) {
  if (o.trials == 0) throw std::invalid_argument("equiv: --trials must be >= 1");
  const EquivalenceReport r = check_equivalence(o.trials, o.seed);
  const bool pass = r.max_abs_deviation < kEquivalenceTolerance;
  with_output(o.out, [&](std::ostream& os) {
    os << "trials,outputs,max_abs_deviation,tolerance,pass\n"
       << r.trials << ',' << r.outputs << ',' << format_number(r.max_abs_deviation) << ','
       << format_number(kEquivalenceTolerance) << ',' << (pass ? "pass" : "fail") << '\n';
  });
  return pass ? kExitOk : kExitRuntime;
}

// Keeps the largest 8-connected component so a stray blob does not stop
// disk extraction.
MaskGrid largest_component(const MaskGrid& m) {
  const std::size_t h = m.height(), w = m.width();
  std::vector<int> label(h * w, -1);
  std::vector<std::size_t> sizes;
  for (std::size_t start = 0; start < h * w; ++start) {
    if (!m.bits()[start] || label[start] >= 0) continue;
    const int id = static_cast<int>(sizes.size());
    sizes.push_back(0);
    std::vector<std::size_t> stack{start};
    label[start] = id;
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      ++sizes.back();
      const long y = static_cast<long>(i / w), x = static_cast<long>(i % w);
      for (long dy = -1; dy <= 1; ++dy) {
        for (long dx = -1; dx <= 1; ++dx) {
          const long ny = y + dy, nx = x + dx;
          if (ny < 0 || nx < 0 || ny >= static_cast<long>(h) || nx >= static_cast<long>(w)) continue;
          const std::size_t j = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
          if (m.bits()[j] && label[j] < 0) {
            label[j] = id;
            stack.push_back(j);
          }
        }
      }
    }
  }
  if (sizes.size() <= 1) return m;
  const int best = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
  MaskGrid out(h, w);
  for (std::size_t i = 0; i < h * w; ++i) {
    if (label[i] == best) out.set(i / w, i % w, true);
  }
  return out;
}

int cmd_ef(const Options& o) {
  if (o.disks == 0) throw std::invalid_argument("ef: --disks must be >= 1");
  if (o.cases.empty() == o.checkpoint.empty()) throw std::invalid_argument("ef: give exactly one of --cases or --checkpoint");
  std::vector<EfRow> rows;
  if (!o.cases.empty()) {
    // case_id,pred_ed,pred_es,truth_ed,truth_es[,pred_ed_2c,pred_es_2c,truth_ed_2c,truth_es_2c]
    std::ifstream is(o.cases);
    if (!is) throw std::invalid_argument("ef: cannot open " + o.cases);
    const fs::path dir = fs::path(o.cases).parent_path();
    std::string line;
    while (std::getline(is, line)) {
      if (trim(line).empty() || line.rfind("case_id", 0) == 0 || line[0] == '#') continue;
      const auto f = split(trim(line), ',');
      if (f.size() != 5 && f.size() != 9) throw std::invalid_argument("ef: case line needs 5 or 9 fields: " + line);
      auto mask = [&](std::size_t i) { return load_mask(dir / std::string(trim(f[i]))); };
      auto volume = [&](std::size_t four, std::size_t two) {
        const DiskProfile p4 = extract_disks(mask(four), o.disks);
        if (f.size() == 5) return simpson_single(p4);
        return simpson_biplane(combine_views(p4, extract_disks(mask(two), o.disks)));
      };
      EfRow r{std::string(trim(f[0]))};
      r.v_ed = volume(1, 5);
      r.v_es = volume(2, 6);
      r.ef_pred = ejection_fraction(r.v_ed, r.v_es);
      r.ef_truth = ejection_fraction(volume(3, 7), volume(4, 8));
      rows.push_back(r);
    }
  } else {
    const TrainConfig cfg = base_config(o.config);
    const Checkpoint ck = load_checkpoint(o.checkpoint);
    const auto videos = benchmark_videos(cfg);
    for (std::size_t i = 0; i < videos.size(); ++i) {
      const Video& v = videos[i];
      std::size_t ed = 0, es = 0;
      for (std::size_t t = 0; t < v.length(); ++t) {
        if (v.masks[t].count() > v.masks[ed].count()) ed = t;
        if (v.masks[t].count() < v.masks[es].count()) es = t;
      }
      const auto pred = predict(ck.params, ck.config, v.frames, v.masks[0]);
      if (pred[ed].empty() || pred[es].empty()) {
        std::cerr << "ef: skipping v" << i << " (empty prediction at ED or ES)\n";
        continue;
      }
      EfRow r{"v" + std::to_string(i)};
      r.v_ed = mask_volume(largest_component(pred[ed]), o.disks);
      r.v_es = mask_volume(largest_component(pred[es]), o.disks);
      r.ef_pred = ejection_fraction(r.v_ed, r.v_es);
      r.ef_truth = ejection_fraction(mask_volume(v.masks[ed], o.disks), mask_volume(v.masks[es], o.disks));
      rows.push_back(r);
    }
  }
  with_output(o.out, [&](std::ostream& os) { write_ef_csv(os, rows); });
  return kExitOk;
}

int cmd_gatestats(const Options& o) {
  if (o.inputs.size() != 1) throw std::invalid_argument("gatestats: exactly one --in trace is required");
  std::ifstream is(o.inputs[0]);
  if (!is) throw std::invalid_argument("gatestats: cannot open " + o.inputs[0]);
  const GateStatistics stats = gate_statistics(read_gate_trace_csv(is));
  with_output(o.out, [&](std::ostream& os) { write_gate_statistics_csv(os, stats); });
  return kExitOk;
}

int cmd_ablate(const Options& o) {
  TrainConfig cfg = base_config(o.config);
  if (!o.normalize.empty()) cfg.model.normalize = parse_bool(o.normalize);
  if (o.steps_given) cfg.steps = o.steps;
  if (o.seed_given) {
    const std::size_t n = cfg.seeds.size();
    cfg.seeds.clear();
    for (std::size_t i = 0; i < n; ++i) cfg.seeds.push_back(o.seed + i);
  }
  const AblationResult r = ablation_suite(cfg);
  with_output(o.out, [&](std::ostream& os) { write_ablation_csv(os, r); });
  for (const auto& s : r.summary) {
    std::cerr << s.variant << " dice " << format_number(s.mean.dice) << " +- " << format_number(s.dice_std) << "\n";
  }
  return kExitOk;
}

}  // namespace

int dispatch(const std::vector<std::string>& args) {
  CLI::App app{"gdkvm: gated delta-rule key-value memory toolkit", "gdkvm"};
  app.require_subcommand(1);
  Options o;
  const std::vector<std::string> strategies{"baseline", "sanity", "noalpha", "nobeta", "gdr"};
  const std::vector<std::string> switches{"on", "off"};

  auto seed = [&](CLI::App* c) {
    c->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& v) {
          o.seed = v;
          o.seed_given = true;
        }, "64-bit seed for all randomness");
  };
  auto out = [&](CLI::App* c, const char* what) { c->add_option("--out", o.out, what); };
  auto config = [&](CLI::App* c) {
    c->add_option("--config", o.config, "key = value config file")->check(CLI::ExistingFile);
  };
  auto strategy = [&](CLI::App* c) {
    c->add_option("--strategy", o.strategy, "state update strategy")->check(CLI::IsMember(strategies));
  };
  auto normalize = [&](CLI::App* c) {
    c->add_option("--normalize", o.normalize, "normalized readout")->check(CLI::IsMember(switches));
  };
  auto kpff = [&](CLI::App* c) {
    c->add_option("--kpff", o.kpff, "key-pixel feature fusion")->check(CLI::IsMember(switches));
  };
  auto steps = [&](CLI::App* c) {
    c->add_option_function<std::size_t>(
        "--steps", [&](const std::size_t& v) {
          o.steps = v;
          o.steps_given = true;
        }, "training steps");
  };

  CLI::App* gen = app.add_subcommand("gen", "write one synthetic echo video (frames + masks)");
  seed(gen);
  out(gen, "output video file");
  config(gen);

  CLI::App* train_cmd = app.add_subcommand("train", "train the toy model; writes a checkpoint and CSV logs");
  seed(train_cmd);
  out(train_cmd, "checkpoint path");
  config(train_cmd);
  strategy(train_cmd);
  normalize(train_cmd);
  kpff(train_cmd);
  steps(train_cmd);

  CLI::App* eval = app.add_subcommand("eval", "score a checkpoint: per-frame dice, iou, hd, asd");
  out(eval, "CSV path (default stdout)");
  config(eval);
  eval->add_option("--checkpoint", o.checkpoint, "checkpoint path");
  eval->add_option("--in", o.inputs, "video files (default: the benchmark set)");

  CLI::App* bench = app.add_subcommand("bench", "time softmax vs recurrent matching over video length");
  seed(bench);
  out(bench, "CSV path (default stdout)");
  bench->add_option("--lengths", o.lengths, "comma-separated frame counts")->capture_default_str();
  bench->add_option("--pixels", o.pixels, "tokens per frame")->capture_default_str();

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every model parameter (64-bit)");
  seed(gradcheck);
  out(gradcheck, "CSV path (default stdout)");
  strategy(gradcheck);
  normalize(gradcheck);
  kpff(gradcheck);

  CLI::App* equiv = app.add_subcommand("equiv", "parallel vs recurrent linear matching on random instances");
  seed(equiv);
  out(equiv, "CSV path (default stdout)");
  equiv->add_option("--trials", o.trials, "random instances")->capture_default_str();

  CLI::App* ef = app.add_subcommand("ef", "ejection fraction by the method of disks");
  out(ef, "CSV path (default stdout)");
  config(ef);
  ef->add_option("--cases", o.cases, "case list: case_id,pred_ed,pred_es,truth_ed,truth_es[,2c x4]")
      ->check(CLI::ExistingFile);
  ef->add_option("--checkpoint", o.checkpoint, "run a checkpoint on the benchmark set instead");
  ef->add_option("--disks", o.disks, "disks per volume")->capture_default_str();

  CLI::App* gatestats = app.add_subcommand("gatestats", "histograms and correlation of a gate trace");
  out(gatestats, "CSV path (default stdout)");
  gatestats->add_option("--in", o.inputs, "gate trace CSV written by train")->check(CLI::ExistingFile);

  CLI::App* ablate = app.add_subcommand("ablate", "train and score every update strategy plus KPFF off");
  seed(ablate);
  out(ablate, "CSV path (default stdout)");
  config(ablate);
  normalize(ablate);
  steps(ablate);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    std::cout << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n"
              << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen(o);
    if (train_cmd->parsed()) return cmd_train(o);
    if (eval->parsed()) return cmd_eval(o);
    if (bench->parsed()) return cmd_bench(o);
    if (gradcheck->parsed()) return cmd_gradcheck(o);
    if (equiv->parsed()) return cmd_equiv(o);
    if (ef->parsed()) return cmd_ef(o);
    if (gatestats->parsed()) return cmd_gatestats(o);
    if (ablate->parsed()) return cmd_ablate(o);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return dispatch(args);
}

}  // namespace gdkvm
