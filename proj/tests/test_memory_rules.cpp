#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "gdkvm/memory_rules.hpp"
#include "gdkvm/ops.hpp"
#include "test_util.hpp"

using namespace gdkvm;
using test::random_tensor;

namespace {

Tensor64 unit(const Tensor64& k) {
  double n = 0;
  for (double x : k.data()) n += x * x;
  Tensor64 u = k;
  for (auto& x : u.data()) x /= std::sqrt(n);
  return u;
}

Tensor64 times_key(const Tensor64& S, const Tensor64& k) {
  Tensor64 out({S.dim(0)});
  for (std::size_t i = 0; i < S.dim(0); ++i)
    for (std::size_t j = 0; j < S.dim(1); ++j) out[i] += S.at(i, j) * k[j];
  return out;
}

// decay * (S - erase (S k) k^T) + write v k^T, written out element by element.
Tensor64 unrolled(const Tensor64& S, const Tensor64& key, const Tensor64& v, double decay, double erase,
                  double write) {
  const Tensor64 k = unit(key);
  const Tensor64 sk = times_key(S, k);
  Tensor64 out(S.shape());
  for (std::size_t i = 0; i < S.dim(0); ++i)
    for (std::size_t j = 0; j < S.dim(1); ++j)
      out.at(i, j) = decay * (S.at(i, j) - erase * sk[i] * k[j]) + write * v[i] * k[j];
  return out;
}

MemoryState<double> state_of(const Tensor64& S) { return MemoryState<double>{S, std::nullopt, 0}; }

}  // namespace

TEST(Gates, ZeroStateGivesBiasGates) {
  auto proj = GateProjection<double>::initial(3, 4);
  auto g = project_gates(proj, MemoryState<double>::zeros(3, 4));
  EXPECT_NEAR(g.alpha, kInitialAlpha, 1e-12);
  EXPECT_NEAR(g.beta, kInitialBeta, 1e-12);
  proj.b_alpha = 0.3;
  proj.b_beta = -1.1;
  Rng rng(1);
  proj.w_alpha = random_tensor<double>({7}, rng);
  g = project_gates(proj, MemoryState<double>::zeros(3, 4));
  EXPECT_DOUBLE_EQ(g.alpha, 1 / (1 + std::exp(-0.3)));
}

TEST(Gates, MatchesDirectFormula) {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    GateProjection<double> proj{random_tensor<double>({7}, rng), random_tensor<double>({7}, rng), 0.2, -0.4};
    auto S = random_tensor<double>({3, 4}, rng, -3, 3);
    auto g = project_gates(proj, state_of(S));
    std::vector<double> s;
    for (std::size_t i = 0; i < 3; ++i) s.push_back((S.at(i, 0) + S.at(i, 1) + S.at(i, 2) + S.at(i, 3)) / 4);
    for (std::size_t j = 0; j < 4; ++j) s.push_back((S.at(0, j) + S.at(1, j) + S.at(2, j)) / 3);
    double za = 0.2, zb = -0.4;
    for (std::size_t i = 0; i < 7; ++i) {
      za += proj.w_alpha[i] * s[i];
      zb += proj.w_beta[i] * s[i];
    }
    EXPECT_NEAR(g.alpha, 1 / (1 + std::exp(-za)), 1e-12);
    EXPECT_NEAR(g.beta, 1 / (1 + std::exp(-zb)), 1e-12);
    auto big = S;
    for (auto& x : big.data()) x *= 1e6;
    auto gb = project_gates(proj, state_of(big));
    EXPECT_GT(gb.alpha, 0.0);
    EXPECT_LT(gb.alpha, 1.0);
    EXPECT_GT(gb.beta, 0.0);
    EXPECT_LT(gb.beta, 1.0);
  }
}

TEST(DeltaRule, FullWriteRetrievesExactly) {
  Rng rng(3);
  auto k = unit(random_tensor<double>({5}, rng));
  auto v = random_tensor<double>({4}, rng);
  auto s = delta_rule_step(MemoryState<double>::zeros(4, 5), k, v, 1.0);
  auto r = times_key(s.S, k);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(r[i], v[i], 1e-12);
}

TEST(DeltaRule, ZeroBetaLeavesStateUnchanged) {
  Rng rng(4);
  auto S = random_tensor<double>({4, 5}, rng);
  auto s = delta_rule_step(state_of(S), random_tensor<double>({5}, rng), random_tensor<double>({4}, rng), 0.0);
  EXPECT_EQ(s.S, S);
}

TEST(DeltaRule, TwoHalfWritesInterpolate) {
  Rng rng(5);
  auto k = unit(random_tensor<double>({5}, rng));
  auto v1 = random_tensor<double>({4}, rng), v2 = random_tensor<double>({4}, rng);
  auto s = delta_rule_step(MemoryState<double>::zeros(4, 5), k, v1, 0.5);
  s = delta_rule_step(s, k, v2, 0.5);
  auto r = times_key(s.S, k);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(r[i], 0.25 * v1[i] + 0.5 * v2[i], 1e-12);
}

TEST(DeltaRule, NonUnitKeyNormalizedAndZeroKeyRejected) {
  Rng rng(6);
  auto k = random_tensor<double>({5}, rng, 1, 3);
  auto v = random_tensor<double>({4}, rng);
  auto s = delta_rule_step(MemoryState<double>::zeros(4, 5), k, v, 1.0);
  auto r = times_key(s.S, unit(k));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(r[i], v[i], 1e-12);
  EXPECT_THROW(delta_rule_step(MemoryState<double>::zeros(4, 5), Tensor64({5}), v, 1.0), DegenerateError);
  EXPECT_THROW(delta_rule_step(MemoryState<double>::zeros(4, 5), Tensor64({4}, 1.0), v, 1.0), DimensionError);
}

TEST(GatedDeltaRule, AlphaOneIsDeltaRuleBitwise) {
  Rng rng(7);
  auto s1 = state_of(random_tensor<double>({4, 5}, rng)), s2 = s1;
  for (int step = 0; step < 100; ++step) {
    auto k = random_tensor<double>({5}, rng), v = random_tensor<double>({4}, rng);
    const double beta = rng.uniform(0.01, 0.99);
    s1 = gdr_step(s1, k, v, GateValues<double>{1.0, beta});
    s2 = delta_rule_step(s2, k, v, beta);
    ASSERT_EQ(s1.S, s2.S);
  }
}

TEST(GatedDeltaRule, ZeroBetaIsPureDecay) {
  Rng rng(8);
  auto S = random_tensor<double>({4, 5}, rng);
  auto s = gdr_step(state_of(S), random_tensor<double>({5}, rng), random_tensor<double>({4}, rng),
                    GateValues<double>{0.7, 0.0});
  for (std::size_t i = 0; i < S.size(); ++i) EXPECT_DOUBLE_EQ(s.S[i], 0.7 * S[i]);
}

TEST(GatedDeltaRule, EightStepUnroll) {
  Rng rng(9);
  auto s = MemoryState<double>::zeros(3, 6);
  Tensor64 oracle({3, 6});
  for (int step = 0; step < 8; ++step) {
    auto k = random_tensor<double>({6}, rng), v = random_tensor<double>({3}, rng);
    GateValues<double> g{rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95)};
    s = gdr_step(s, k, v, g);
    oracle = unrolled(oracle, k, v, g.alpha, g.beta, g.beta);
  }
  EXPECT_LE(max_abs_diff(s.S, oracle), 1e-8);
}

TEST(GatedDeltaRule, RetrievalScaledByDecayProduct) {
  Rng rng(10);
  auto k = unit(random_tensor<double>({5}, rng));
  auto v = random_tensor<double>({4}, rng);
  auto s = gdr_step(MemoryState<double>::zeros(4, 5), k, v, GateValues<double>{0.8, 1.0});
  double decay = 1;
  for (int step = 0; step < 5; ++step) {
    const double a = rng.uniform(0.5, 0.99);
    decay *= a;
    s = gdr_step(s, k, v, GateValues<double>{a, 0.0});
  }
  auto r = times_key(s.S, k);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(r[i], decay * v[i], 1e-12);
}

TEST(GatedDeltaRule, TransitionIsNonExpansive) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 6;
    auto k = unit(random_tensor<double>({n}, rng));
    const double a = rng.uniform(0.01, 0.99), b = rng.uniform(0.01, 0.99);
    // A = a (I - b k k^T) is symmetric, so power iteration on A^2 gives the top singular value squared.
    Tensor64 x = random_tensor<double>({n}, rng);
    double sigma = 0;
    for (int it = 0; it < 200; ++it) {
      double kx = 0;
      for (std::size_t i = 0; i < n; ++i) kx += k[i] * x[i];
      Tensor64 y({n});
      for (std::size_t i = 0; i < n; ++i) y[i] = a * (x[i] - b * kx * k[i]);
      double norm = 0;
      for (double t : y.data()) norm += t * t;
      norm = std::sqrt(norm);
      double xn = 0;
      for (double t : x.data()) xn += t * t;
      sigma = norm / std::sqrt(xn);
      for (std::size_t i = 0; i < n; ++i) x[i] = y[i] / norm;
    }
    EXPECT_LE(sigma, a + 1e-12);
    EXPECT_LT(sigma, 1.0);
  }
}

TEST(Strategies, CoefficientsPerRule) {
  const GateValues<double> g{0.6, 0.3};
  auto c = strategy_coefficients(UpdateStrategy::kBaseline, g);
  EXPECT_EQ(c.decay, 1.0);
  EXPECT_EQ(c.erase, 0.0);
  EXPECT_EQ(c.write, 1.0);
  c = strategy_coefficients(UpdateStrategy::kSanityCheck, g);
  EXPECT_EQ(c.erase, 1.0);
  EXPECT_EQ(c.write, 1.0);
  c = strategy_coefficients(UpdateStrategy::kNoAlpha, g);
  EXPECT_EQ(c.decay, 1.0);
  EXPECT_EQ(c.erase, 0.3);
  c = strategy_coefficients(UpdateStrategy::kNoBeta, g);
  EXPECT_EQ(c.decay, 0.6);
  EXPECT_EQ(c.erase, 0.0);
  EXPECT_EQ(c.write, 1.0);
  c = strategy_coefficients(UpdateStrategy::kGDR, g);
  EXPECT_EQ(c.decay, 0.6);
  EXPECT_EQ(c.erase, 0.3);
  EXPECT_EQ(c.write, 0.3);
}

TEST(Strategies, BaselineAccumulates) {
  Rng rng(12);
  auto k = unit(random_tensor<double>({4}, rng));
  auto v = random_tensor<double>({3}, rng);
  const GateValues<double> g{0.5, 0.5};
  auto s = apply_strategy(UpdateStrategy::kBaseline, MemoryState<double>::zeros(3, 4), k, v, g);
  s = apply_strategy(UpdateStrategy::kBaseline, s, k, v, g);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(s.S.at(i, j), 2 * v[i] * k[j], 1e-14);
}

TEST(Strategies, SanityCheckOverwritesAlongKey) {
  Rng rng(13);
  auto k = unit(random_tensor<double>({4}, rng));
  auto v = random_tensor<double>({3}, rng);
  auto s = apply_strategy(UpdateStrategy::kSanityCheck, state_of(random_tensor<double>({3, 4}, rng, -5, 5)), k, v,
                          GateValues<double>{0.5, 0.5});
  auto r = times_key(s.S, k);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(r[i], v[i], 1e-12);
}

TEST(Strategies, GdrWithUnitGatesIsSanityCheckBitwise) {
  Rng rng(14);
  auto s1 = state_of(random_tensor<double>({4, 5}, rng)), s2 = s1;
  for (int step = 0; step < 100; ++step) {
    auto k = random_tensor<double>({5}, rng), v = random_tensor<double>({4}, rng);
    s1 = gdr_step(s1, k, v, GateValues<double>{1.0, 1.0});
    s2 = apply_strategy(UpdateStrategy::kSanityCheck, s2, k, v, GateValues<double>{0.3, 0.4});
    ASSERT_EQ(s1.S, s2.S);
  }
}

TEST(Strategies, SixStepUnrollPerStrategy) {
  for (auto strategy : kAllStrategies) {
    Rng rng(15);
    auto s = MemoryState<double>::zeros(3, 4);
    Tensor64 oracle({3, 4});
    for (int step = 0; step < 6; ++step) {
      auto k = random_tensor<double>({4}, rng), v = random_tensor<double>({3}, rng);
      const double a = rng.uniform(0.1, 0.9), b = rng.uniform(0.1, 0.9);
      s = apply_strategy(strategy, s, k, v, GateValues<double>{a, b});
      switch (strategy) {
        case UpdateStrategy::kBaseline: oracle = unrolled(oracle, k, v, 1, 0, 1); break;
        case UpdateStrategy::kSanityCheck: oracle = unrolled(oracle, k, v, 1, 1, 1); break;
        case UpdateStrategy::kNoAlpha: oracle = unrolled(oracle, k, v, 1, b, b); break;
        case UpdateStrategy::kNoBeta: oracle = unrolled(oracle, k, v, a, 0, 1); break;
        case UpdateStrategy::kGDR: oracle = unrolled(oracle, k, v, a, b, b); break;
      }
    }
    EXPECT_LE(max_abs_diff(s.S, oracle), 1e-12) << strategy_name(strategy);
  }
}

TEST(Strategies, GdrClosedFormProductSum32Bit) {
  // With one fixed unit key and full writes the state collapses to a product-sum.
  Rng rng(16);
  auto k64 = unit(random_tensor<double>({6}, rng));
  auto s = MemoryState<float>::zeros(4, 6);
  Tensor64 expected({4, 6});
  for (int step = 0; step < 20; ++step) {
    auto v = random_tensor<double>({4}, rng);
    const double a = rng.uniform(0.5, 0.99), b = rng.uniform(0.1, 0.9);
    s = apply_strategy(UpdateStrategy::kGDR, s, k64.cast<float>(), v.cast<float>(),
                       GateValues<float>{float(a), float(b)});
    expected = unrolled(expected, k64, v, a, b, b);
  }
  EXPECT_LE(max_abs_diff(s.S.cast<double>(), expected), 1e-5);
}

TEST(Strategies, NamesRoundTrip) {
  for (auto s : kAllStrategies) EXPECT_EQ(parse_strategy(strategy_name(s)), s);
  EXPECT_FALSE(parse_strategy("gdr2").has_value());
}

TEST(Readout, ZeroRankOneAndMatmul) {
  Rng rng(17);
  auto q = random_tensor<double>({5, 4}, rng);
  auto zero = readout(MemoryState<double>::zeros(3, 4), q);
  for (double x : zero.data()) EXPECT_EQ(x, 0.0);
  auto k = random_tensor<double>({4}, rng), v = random_tensor<double>({3}, rng);
  Tensor64 S({3, 4});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) S.at(i, j) = v[i] * k[j];
  auto r = readout(state_of(S), k.reshaped({1, 4}));
  double kphi = 0;
  for (std::size_t j = 0; j < 4; ++j) kphi += k[j] * phi(k[j]);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(r[i], v[i] * kphi, 1e-14);
  auto Srand = random_tensor<double>({3, 4}, rng);
  auto full = readout(state_of(Srand), q);
  Tensor64 St({4, 3});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) St.at(j, i) = Srand.at(i, j);
  EXPECT_LE(max_abs_diff(full, matmul(phi_kernel(q), St)), 1e-14);
  EXPECT_THROW(readout(state_of(Srand), Tensor64({5, 3})), DimensionError);
}

TEST(GateStats, ConstantTraceSingleBin) {
  std::vector<GateSample> trace;
  for (std::size_t i = 0; i < 10; ++i) trace.push_back({i, 0.4, 0.6});
  auto st = gate_statistics(trace);
  EXPECT_EQ(st.alpha.occupied_bins(), 1u);
  EXPECT_EQ(st.beta.occupied_bins(), 1u);
  EXPECT_EQ(st.alpha.counts.size(), kGateHistogramBins);
  EXPECT_EQ(st.gradient_count, 9u);
  EXPECT_FALSE(st.grad_correlation.has_value());
}

TEST(GateStats, AlternatingTrace) {
  std::vector<GateSample> trace;
  for (std::size_t i = 0; i < 10; ++i) trace.push_back({i, i % 2 ? 0.8 : 0.2, i % 2 ? 0.2 : 0.8});
  auto st = gate_statistics(trace);
  EXPECT_EQ(st.alpha.occupied_bins(), 2u);
  EXPECT_EQ(st.grad_alpha.occupied_bins(), 2u);
  EXPECT_GT(st.grad_alpha.counts[st.grad_alpha.bin_of(0.6)], 0u);
  EXPECT_GT(st.grad_alpha.counts[st.grad_alpha.bin_of(-0.6)], 0u);
  ASSERT_TRUE(st.grad_correlation.has_value());
  EXPECT_NEAR(*st.grad_correlation, -1.0, 1e-12);
}

TEST(GateStats, CorrelationMatchesPearson) {
  Rng rng(18);
  std::vector<GateSample> trace;
  for (std::size_t i = 0; i < 50; ++i) trace.push_back({i, rng.uniform(), rng.uniform()});
  auto st = gate_statistics(trace);
  std::vector<double> da, db;
  for (std::size_t i = 1; i < 50; ++i) {
    da.push_back(trace[i].alpha - trace[i - 1].alpha);
    db.push_back(trace[i].beta - trace[i - 1].beta);
  }
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < da.size(); ++i) {
    ma += da[i] / da.size();
    mb += db[i] / db.size();
  }
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < da.size(); ++i) {
    sab += (da[i] - ma) * (db[i] - mb);
    saa += (da[i] - ma) * (da[i] - ma);
    sbb += (db[i] - mb) * (db[i] - mb);
  }
  EXPECT_NEAR(*st.grad_correlation, sab / std::sqrt(saa * sbb), 1e-12);
}

TEST(GateStats, SingleSampleAndEmpty) {
  auto st = gate_statistics({{0, 0.5, 0.5}});
  EXPECT_EQ(st.gradient_count, 0u);
  EXPECT_EQ(st.grad_alpha.occupied_bins(), 0u);
  EXPECT_THROW(gate_statistics({}), std::invalid_argument);
}

TEST(GateStats, TraceCsvRoundTrip) {
  std::vector<GateSample> trace{{0, 0.9, 0.5}, {1, 0.875, 0.25}, {2, 0.5, 0.125}};
  std::stringstream ss;
  write_gate_trace_csv(ss, trace);
  EXPECT_EQ(ss.str().substr(0, 36), "step,alpha,beta,grad_alpha,grad_beta");
  auto back = read_gate_trace_csv(ss);
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(back[1].alpha, 0.875);
  EXPECT_EQ(back[2].beta, 0.125);
}
