#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "gdkvm/attention.hpp"
#include "gdkvm/ops.hpp"
#include "test_util.hpp"

using namespace gdkvm;

namespace {

// Softmax over every stored position by explicit double loops.
Tensor64 softmax_oracle(const QKVSequence<double>& s, std::size_t t) {
  const std::size_t hw = s.pixels(), ck = s.key_dim(), cv = s.value_dim();
  Tensor64 out({hw, cv});
  for (std::size_t p = 0; p < hw; ++p) {
    std::vector<double> w;
    double mx = -1e300;
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t r = 0; r < hw; ++r) {
        double d = 0;
        for (std::size_t c = 0; c < ck; ++c) d += s.queries[t - 1].at(p, c) * s.keys[i].at(r, c);
        w.push_back(d);
        mx = std::max(mx, d);
      }
    double z = 0;
    for (auto& x : w) z += (x = std::exp(x - mx));
    std::size_t idx = 0;
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t r = 0; r < hw; ++r, ++idx)
        for (std::size_t c = 0; c < cv; ++c) out.at(p, c) += w[idx] / z * s.values[i].at(r, c);
  }
  return out;
}

}  // namespace

TEST(SoftmaxMatching, SingleFrameSingleKeyReturnsValue) {
  auto seq = random_sequence<float>(1, 1, 3, 2, 1);
  EXPECT_EQ(softmax_matching(seq, 1), seq.values[0]);
}

TEST(SoftmaxMatching, IdenticalKeysAverageValues) {
  QKVSequence<double> seq;
  seq.queries = {Tensor64({2, 2}, {0.3, -0.2, 1.5, 0.7})};
  seq.keys = {Tensor64({2, 2}, {1.0, 2.0, 1.0, 2.0})};
  seq.values = {Tensor64({2, 3}, {1, 2, 3, 5, 6, 7})};
  auto o = softmax_matching(seq, 1);
  for (std::size_t p = 0; p < 2; ++p) {
    EXPECT_NEAR(o.at(p, 0), 3.0, 1e-15);
    EXPECT_NEAR(o.at(p, 1), 4.0, 1e-15);
    EXPECT_NEAR(o.at(p, 2), 5.0, 1e-15);
  }
}

TEST(SoftmaxMatching, MatchesDoubleLoopOracle) {
  auto seq = random_sequence<double>(3, 4, 2, 2, 5);
  for (std::size_t t = 1; t <= 3; ++t) EXPECT_LE(max_abs_diff(softmax_matching(seq, t), softmax_oracle(seq, t)), 1e-5);
}

TEST(SoftmaxMatching, OutputInsideValueHullAndPermutationInvariant) {
  auto seq = random_sequence<double>(4, 6, 3, 3, 6);
  auto o = softmax_matching(seq, 4);
  for (std::size_t c = 0; c < 3; ++c) {
    double lo = 1e9, hi = -1e9;
    for (const auto& v : seq.values)
      for (std::size_t r = 0; r < 6; ++r) {
        lo = std::min(lo, v.at(r, c));
        hi = std::max(hi, v.at(r, c));
      }
    for (std::size_t p = 0; p < 6; ++p) {
      EXPECT_GE(o.at(p, c), lo - 1e-12);
      EXPECT_LE(o.at(p, c), hi + 1e-12);
    }
  }
  auto swapped = seq;
  std::swap(swapped.keys[0], swapped.keys[2]);
  std::swap(swapped.values[0], swapped.values[2]);
  EXPECT_LE(max_abs_diff(softmax_matching(swapped, 4), o), 1e-12);
  EXPECT_LE(max_abs_diff(linear_matching_parallel(swapped, 4), linear_matching_parallel(seq, 4)), 1e-12);
}

TEST(SoftmaxMatching, FrameIndexValidated) {
  auto seq = random_sequence<float>(2, 2, 2, 2, 1);
  EXPECT_THROW(softmax_matching(seq, 0), DimensionError);
  EXPECT_THROW(softmax_matching(seq, 3), DimensionError);
  seq.values[1] = Tensor({3, 2});
  EXPECT_THROW(softmax_matching(seq, 1), DimensionError);
}

TEST(LinearMatching, SingleFrameSinglePixelReturnsValue) {
  auto seq = random_sequence<double>(1, 1, 4, 3, 2);
  EXPECT_LE(max_abs_diff(linear_matching_parallel(seq, 1), seq.values[0]), 1e-15);
}

TEST(LinearMatching, ExpDotKernelReproducesSoftmaxOnScalarKeys) {
  auto seq = random_sequence<double>(3, 5, 1, 2, 3);
  for (std::size_t t = 1; t <= 3; ++t) {
    EXPECT_LE(max_abs_diff(linear_matching_parallel(seq, t, MatchingKernel::kExpDot), softmax_matching(seq, t)),
              1e-12);
  }
}

TEST(LinearMatching, RecurrentEqualsParallel) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto seq = random_sequence<double>(1 + seed % 7, 1 + seed % 9, 4, 3, seed);
    auto state = MemoryState<double>::zeros(3, 4, true);
    for (std::size_t t = 0; t < seq.frames(); ++t) {
      auto [next, out] = linear_matching_recurrent(state, seq.keys[t], seq.values[t], seq.queries[t], true);
      state = std::move(next);
      EXPECT_LE(max_abs_diff(out, linear_matching_parallel(seq, t + 1)), 1e-10);
    }
    EXPECT_EQ(state.frame_index, seq.frames());
    for (double z : state.Z->data()) EXPECT_GT(z, 0.0);
  }
}

TEST(LinearMatching, RecurrentSingleOuterProduct) {
  // One pixel with k = -inf-like so phi(k) is a unit basis vector.
  auto state = MemoryState<double>::zeros(2, 3, true);
  Tensor64 k({1, 3}, {0.0, -800.0, -800.0});
  Tensor64 v({1, 2}, {4.0, -2.0});
  auto [next, out] = linear_matching_recurrent(state, k, v, k, false);
  EXPECT_DOUBLE_EQ(out[0], 4.0);
  EXPECT_DOUBLE_EQ(out[1], -2.0);
  auto [n2, normed] = linear_matching_recurrent(state, k, v, k, true);
  EXPECT_DOUBLE_EQ(normed[0], 4.0);
  EXPECT_DOUBLE_EQ((*n2.Z)[0], 1.0);
}

TEST(LinearMatching, RecurrentRejectsMismatch) {
  auto state = MemoryState<float>::zeros(2, 3);
  EXPECT_THROW(linear_matching_recurrent(state, Tensor({4, 2}), Tensor({4, 2}), Tensor({4, 3}), false),
               DimensionError);
  EXPECT_THROW(linear_matching_recurrent(state, Tensor({4, 3}), Tensor({5, 2}), Tensor({4, 3}), false),
               DimensionError);
}

TEST(LinearMatching, EquivalenceHarness32Bit) {
  const auto r = check_equivalence(100, 4);
  EXPECT_EQ(r.trials, 100u);
  EXPECT_GT(r.outputs, 100u);
  EXPECT_LE(r.max_abs_deviation, 1e-5);
}

TEST(Scaling, LogLogSlopeOfPowerLaw) {
  std::vector<double> x{8, 16, 32, 64}, y;
  for (double v : x) y.push_back(3.0 * v * v);
  EXPECT_NEAR(loglog_slope(x, y), 2.0, 1e-12);
}
