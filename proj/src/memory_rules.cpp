#include "gdkvm/memory_rules.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "gdkvm/kernels.hpp"
#include "gdkvm/ops.hpp"

namespace gdkvm {

template <typename T>
GateProjection<T> GateProjection<T>::initial(std::size_t value_dim, std::size_t key_dim) {
  GateProjection p;
  p.w_alpha = BasicTensor<T>({value_dim + key_dim});
  p.w_beta = BasicTensor<T>({value_dim + key_dim});
  p.b_alpha = static_cast<T>(std::log(kInitialAlpha / (1.0 - kInitialAlpha)));
  p.b_beta = static_cast<T>(std::log(kInitialBeta / (1.0 - kInitialBeta)));
  return p;
}

std::string_view strategy_name(UpdateStrategy s) {
  switch (s) {
    case UpdateStrategy::kBaseline: return "baseline";
    case UpdateStrategy::kSanityCheck: return "sanity";
    case UpdateStrategy::kNoAlpha: return "noalpha";
    case UpdateStrategy::kNoBeta: return "nobeta";
    case UpdateStrategy::kGDR: return "gdr";
  }
  return "?";
}

std::optional<UpdateStrategy> parse_strategy(std::string_view name) {
  for (UpdateStrategy s : kAllStrategies) {
    if (strategy_name(s) == name) return s;
  }
  return std::nullopt;
}

template <typename T>
UpdateCoefficients<T> strategy_coefficients(UpdateStrategy s, const GateValues<T>& g) {
  switch (s) {
    case UpdateStrategy::kBaseline: return {T{1}, T{0}, T{1}};
    case UpdateStrategy::kSanityCheck: return {T{1}, T{1}, T{1}};
    case UpdateStrategy::kNoAlpha: return {T{1}, g.beta, g.beta};
    case UpdateStrategy::kNoBeta: return {g.alpha, T{0}, T{1}};
    case UpdateStrategy::kGDR: return {g.alpha, g.beta, g.beta};
  }
  throw std::invalid_argument("unknown update strategy");
}

template <typename T>
BasicTensor<T> state_summary(const BasicTensor<T>& S) {
  if (S.rank() != 2) throw DimensionError("state_summary: S must be Cv x Ck");
  const std::size_t cv = S.dim(0), ck = S.dim(1);
  BasicTensor<T> s({cv + ck});
  for (std::size_t i = 0; i < cv; ++i) {
    T row = 0;
    for (std::size_t j = 0; j < ck; ++j) {
      row += S.at(i, j);
      s[cv + j] += S.at(i, j);
    }
    s[i] = row / static_cast<T>(ck);
  }
  for (std::size_t j = 0; j < ck; ++j) s[cv + j] /= static_cast<T>(cv);
  return s;
}

template <typename T>
GateValues<T> project_gates(const GateProjection<T>& proj, const MemoryState<T>& state) {
  const BasicTensor<T> s = state_summary(state.S);
  require_same_shape(proj.w_alpha.shape(), s.shape(), "project_gates w_alpha");
  require_same_shape(proj.w_beta.shape(), s.shape(), "project_gates w_beta");
  const auto& K = kernels::active<T>();
  const T za = K.dot(proj.w_alpha.ptr(), s.ptr(), s.size()) + proj.b_alpha;
  const T zb = K.dot(proj.w_beta.ptr(), s.ptr(), s.size()) + proj.b_beta;
  return {sigmoid(za), sigmoid(zb)};
}

template <typename T>
BasicTensor<T> normalize_key(const BasicTensor<T>& k) {
  const T norm = std::sqrt(kernels::active<T>().dot(k.ptr(), k.ptr(), k.size()));
  if (!(norm > T{0})) throw DegenerateError("key has zero norm and cannot be written");
  BasicTensor<T> out(k.shape());
  for (std::size_t i = 0; i < k.size(); ++i) out[i] = k[i] / norm;
  return out;
}

namespace {

template <typename T>
MemoryState<T> update(const MemoryState<T>& state, const BasicTensor<T>& k_raw, const BasicTensor<T>& v,
                      const UpdateCoefficients<T>& c) {
  if (state.S.rank() != 2) throw DimensionError("memory update: S must be Cv x Ck");
  const std::size_t cv = state.S.dim(0), ck = state.S.dim(1);
  if (k_raw.size() != ck || v.size() != cv) {
    throw DimensionError("memory update: key/value sizes " + std::to_string(k_raw.size()) + "/" +
                         std::to_string(v.size()) + " do not match state " + shape_string(state.S.shape()));
  }
  const BasicTensor<T> k = normalize_key(k_raw);
  const auto& K = kernels::active<T>();
  std::vector<T> erase(cv), write(cv);
  for (std::size_t i = 0; i < cv; ++i) {
    erase[i] = c.erase * K.dot(state.S.ptr() + i * ck, k.ptr(), ck);
    write[i] = c.write * v[i];
  }
  MemoryState<T> next = state;
  K.decay_rank2(next.S.ptr(), cv, ck, c.decay, erase.data(), write.data(), k.ptr());
  return next;
}

}  // namespace

template <typename T>
MemoryState<T> delta_rule_step(const MemoryState<T>& state, const BasicTensor<T>& k, const BasicTensor<T>& v,
                               T beta) {
  return update(state, k, v, UpdateCoefficients<T>{T{1}, beta, beta});
}

template <typename T>
MemoryState<T> gdr_step(const MemoryState<T>& state, const BasicTensor<T>& k, const BasicTensor<T>& v,
                        const GateValues<T>& gates) {
  return update(state, k, v, UpdateCoefficients<T>{gates.alpha, gates.beta, gates.beta});
}

template <typename T>
MemoryState<T> apply_strategy(UpdateStrategy strategy, const MemoryState<T>& state, const BasicTensor<T>& k,
                              const BasicTensor<T>& v, const GateValues<T>& gates) {
  return update(state, k, v, strategy_coefficients(strategy, gates));
}

template <typename T>
BasicTensor<T> readout(const MemoryState<T>& state, const BasicTensor<T>& q) {
  if (q.rank() != 2 || state.S.rank() != 2 || q.dim(1) != state.S.dim(1)) {
    throw DimensionError("readout: queries " + shape_string(q.shape()) + " do not match state " +
                         shape_string(state.S.shape()));
  }
  const std::size_t hw = q.dim(0), cv = state.S.dim(0), ck = state.S.dim(1);
  const BasicTensor<T> phi_q = phi_kernel(q);
  BasicTensor<T> out({hw, cv});
  kernels::active<T>().gemm_nt(hw, cv, ck, phi_q.ptr(), state.S.ptr(), out.ptr(), false);
  return out;
}

// ---------------------------------------------------------------------------
// Gate statistics

std::size_t Histogram::bin_of(double v) const {
  const double span = upper - lower;
  const double pos = (v - lower) / span * static_cast<double>(counts.size());
  const auto last = static_cast<std::ptrdiff_t>(counts.size()) - 1;
  return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(std::floor(pos)), 0, last));
}

std::size_t Histogram::occupied_bins() const {
  return static_cast<std::size_t>(std::count_if(counts.begin(), counts.end(), [](std::size_t c) { return c > 0; }));
}

namespace {

Histogram make_histogram(double lower, double upper) {
  return Histogram{lower, upper, std::vector<std::size_t>(kGateHistogramBins, 0)};
}

std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  if (n < 2) return std::nullopt;
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace

GateStatistics gate_statistics(const std::vector<GateSample>& trace) {
  if (trace.empty()) throw std::invalid_argument("gate_statistics: empty trace");
  GateStatistics stats{make_histogram(0, 1), make_histogram(0, 1), make_histogram(-1, 1), make_histogram(-1, 1), 0, std::nullopt};
  std::vector<double> da, db;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    ++stats.alpha.counts[stats.alpha.bin_of(trace[i].alpha)];
    ++stats.beta.counts[stats.beta.bin_of(trace[i].beta)];
    if (i > 0) {
      da.push_back(trace[i].alpha - trace[i - 1].alpha);
      db.push_back(trace[i].beta - trace[i - 1].beta);
      ++stats.grad_alpha.counts[stats.grad_alpha.bin_of(da.back())];
      ++stats.grad_beta.counts[stats.grad_beta.bin_of(db.back())];
    }
  }
  stats.gradient_count = da.size();
  stats.grad_correlation = pearson(da, db);
  return stats;
}

void write_gate_trace_csv(std::ostream& os, const std::vector<GateSample>& trace) {
  os << "step,alpha,beta,grad_alpha,grad_beta\n";
  char buf[160];
  for (std::size_t i = 0; i < trace.size(); ++i) {
    if (i == 0) {
      std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,,\n", trace[i].step, trace[i].alpha, trace[i].beta);
    } else {
      std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g\n", trace[i].step, trace[i].alpha, trace[i].beta,
                    trace[i].alpha - trace[i - 1].alpha, trace[i].beta - trace[i - 1].beta);
    }
    os << buf;
  }
}

std::vector<GateSample> read_gate_trace_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line.rfind("step,alpha,beta", 0) != 0) {
    throw FormatError("gate trace: missing header step,alpha,beta,...");
  }
  std::vector<GateSample> trace;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string step, alpha, beta;
    if (!std::getline(row, step, ',') || !std::getline(row, alpha, ',') || !std::getline(row, beta, ',')) {
      throw FormatError("gate trace: malformed line " + std::to_string(lineno));
    }
    try {
      trace.push_back({std::stoull(step), std::stod(alpha), std::stod(beta)});
    } catch (const std::exception&) {
      throw FormatError("gate trace: non-numeric field on line " + std::to_string(lineno));
    }
  }
  return trace;
}

void write_gate_statistics_csv(std::ostream& os, const GateStatistics& stats) {
  os << "series,bin,lower,upper,count\n";
  auto emit = [&os](const char* name, const Histogram& h) {
    const double width = (h.upper - h.lower) / static_cast<double>(h.counts.size());
    char buf[160];
    for (std::size_t b = 0; b < h.counts.size(); ++b) {
      std::snprintf(buf, sizeof buf, "%s,%zu,%.6f,%.6f,%zu\n", name, b, h.lower + width * static_cast<double>(b),
                    h.lower + width * static_cast<double>(b + 1), h.counts[b]);
      os << buf;
    }
  };
  emit("alpha", stats.alpha);
  emit("beta", stats.beta);
  if (stats.gradient_count > 0) {
    emit("grad_alpha", stats.grad_alpha);
    emit("grad_beta", stats.grad_beta);
  }
  char buf[96];
  if (stats.grad_correlation) {
    std::snprintf(buf, sizeof buf, "grad_pearson,,,,%.9g\n", *stats.grad_correlation);
  } else {
    std::snprintf(buf, sizeof buf, "grad_pearson,,,,nan\n");
  }
  os << buf;
}

#define GDKVM_INSTANTIATE_RULES(T)                                                                                  \
  template struct GateProjection<T>;                                                                                \
  template UpdateCoefficients<T> strategy_coefficients(UpdateStrategy, const GateValues<T>&);                       \
  template BasicTensor<T> state_summary(const BasicTensor<T>&);                                                     \
  template GateValues<T> project_gates(const GateProjection<T>&, const MemoryState<T>&);                            \
  template BasicTensor<T> normalize_key(const BasicTensor<T>&);                                                     \
  template MemoryState<T> delta_rule_step(const MemoryState<T>&, const BasicTensor<T>&, const BasicTensor<T>&, T);  \
  template MemoryState<T> gdr_step(const MemoryState<T>&, const BasicTensor<T>&, const BasicTensor<T>&,             \
                                   const GateValues<T>&);                                                           \
  template MemoryState<T> apply_strategy(UpdateStrategy, const MemoryState<T>&, const BasicTensor<T>&,              \
                                         const BasicTensor<T>&, const GateValues<T>&);                              \
  template BasicTensor<T> readout(const MemoryState<T>&, const BasicTensor<T>&);

GDKVM_INSTANTIATE_RULES(float)
GDKVM_INSTANTIATE_RULES(double)

#undef GDKVM_INSTANTIATE_RULES

}  // namespace gdkvm
