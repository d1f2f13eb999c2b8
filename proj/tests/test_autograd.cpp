#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "gdkvm/autograd.hpp"
#include "gdkvm/gradcheck.hpp"
#include "gdkvm/ops.hpp"
#include "gdkvm/optim.hpp"
#include "gdkvm/training.hpp"
#include "test_util.hpp"

using namespace gdkvm;
using test::random_tensor;
using V = ad::Var<double>;
using TapeD = ad::Tape<double>;

namespace {

// Scalarises an op output against fixed random weights so every output
// element contributes a distinct gradient.
V project(TapeD& tape, V out, std::uint64_t seed) {
  Rng rng(seed, 0x77);
  return ad::dot(out, tape.constant(random_tensor<double>(out.shape(), rng)));
}

using Op = std::function<V(TapeD&, const std::vector<V>&)>;

void check_op(const char* name, std::vector<Shape> shapes, const Op& op, double lo = -1, double hi = 1) {
  for (std::uint64_t instance = 0; instance < 10; ++instance) {
    Rng rng(instance, 0x31);
    ParameterSet<double> params;
    for (std::size_t i = 0; i < shapes.size(); ++i)
      params.push_back({"p" + std::to_string(i), random_tensor<double>(shapes[i], rng, lo, hi)});
    const auto report = finite_difference_check(params, [&](TapeD& tape, const std::vector<V>& vars) {
      return project(tape, op(tape, vars), instance);
    });
    EXPECT_LE(report.worst(), kGradCheckTolerance) << name << " instance " << instance;
  }
}

// Picks the two token rows of frame t out of a 6 x 2 stack.
Tensor64 frame_selector(std::size_t t) {
  Tensor64 sel({2, 12});
  sel.at(0, t * 2) = 1;
  sel.at(1, t * 2 + 1) = 1;
  return sel;
}

}  // namespace

TEST(Tape, QuadraticGradientIsInput) {
  TapeD tape;
  Rng rng(1);
  auto xv = random_tensor<double>({7}, rng);
  V x = tape.parameter(xv);
  V loss = ad::scale(ad::dot(x, x), 0.5);
  tape.backward(loss);
  EXPECT_LE(max_abs_diff(tape.grad(x.id), xv), 1e-15);
}

TEST(Tape, NonScalarRootThrows) {
  TapeD tape;
  V x = tape.parameter(Tensor64({3}, 1.0));
  EXPECT_THROW(tape.backward(ad::scale(x, 2.0)), DimensionError);
}

TEST(Tape, ReplayReproducesForward) {
  TapeD tape;
  Rng rng(2);
  V a = tape.parameter(random_tensor<double>({3, 4}, rng));
  V b = tape.parameter(random_tensor<double>({4, 2}, rng));
  V y = ad::sum(ad::sigmoid(ad::matmul(a, b)));
  const double before = y.value()[0];
  tape.replay();
  EXPECT_EQ(y.value()[0], before);
  auto changed = random_tensor<double>({3, 4}, rng);
  tape.set_value(a.id, changed);
  tape.replay();
  EXPECT_NE(y.value()[0], before);
  double expected = 0;
  const Tensor64 probs = gdkvm::sigmoid(matmul(changed, b.value()));
  for (double v : probs.data()) expected += v;
  EXPECT_DOUBLE_EQ(y.value()[0], expected);
}

TEST(Tape, GradientsAccumulateOverReuse) {
  TapeD tape;
  V x = tape.parameter(Tensor64({2}, {3.0, -1.0}));
  V y = ad::add(ad::mul(x, x), ad::scale(x, 4.0));
  tape.backward(ad::sum(y));
  EXPECT_DOUBLE_EQ(tape.grad(x.id)[0], 2 * 3.0 + 4);
  EXPECT_DOUBLE_EQ(tape.grad(x.id)[1], -2.0 + 4);
}

TEST(Tape, ConstantsGetNoGradient) {
  TapeD tape;
  V c = tape.constant(Tensor64({2}, 1.0));
  V x = tape.parameter(Tensor64({2}, 2.0));
  tape.backward(ad::dot(c, x));
  EXPECT_FALSE(tape.requires_grad(c.id));
  EXPECT_FALSE(tape.has_grad(c.id));
  TapeD frozen(false);
  V p = frozen.parameter(Tensor64({2}, 2.0));
  V q = ad::mul(p, p);
  EXPECT_FALSE(frozen.requires_grad(q.id));
}

TEST(FiniteDifference, Elementwise) {
  check_op("add", {{3, 4}, {3, 4}}, [](TapeD&, const std::vector<V>& v) { return ad::add(v[0], v[1]); });
  check_op("sub", {{3, 4}, {3, 4}}, [](TapeD&, const std::vector<V>& v) { return ad::sub(v[0], v[1]); });
  check_op("mul", {{3, 4}, {3, 4}}, [](TapeD&, const std::vector<V>& v) { return ad::mul(v[0], v[1]); });
  check_op("scale", {{5}}, [](TapeD&, const std::vector<V>& v) { return ad::scale(v[0], -2.5); });
  check_op("relu", {{12}}, [](TapeD&, const std::vector<V>& v) { return ad::relu(v[0]); });
  check_op("silu", {{12}}, [](TapeD&, const std::vector<V>& v) { return ad::silu(v[0]); }, -4, 4);
  check_op("sigmoid", {{12}}, [](TapeD&, const std::vector<V>& v) { return ad::sigmoid(v[0]); }, -6, 6);
  check_op("phi", {{12}}, [](TapeD&, const std::vector<V>& v) { return ad::phi(v[0]); }, -3, 3);
}

TEST(FiniteDifference, Reductions) {
  check_op("reshape", {{2, 6}}, [](TapeD&, const std::vector<V>& v) { return ad::reshape(v[0], {3, 4}); });
  check_op("sum", {{7}}, [](TapeD&, const std::vector<V>& v) { return ad::sum(v[0]); });
  check_op("dot", {{7}, {7}}, [](TapeD&, const std::vector<V>& v) { return ad::dot(v[0], v[1]); });
  check_op("matmul", {{3, 5}, {5, 2}}, [](TapeD&, const std::vector<V>& v) { return ad::matmul(v[0], v[1]); });
  check_op("matmul_nt", {{3, 5}, {4, 5}},
           [](TapeD&, const std::vector<V>& v) { return ad::matmul_nt(v[0], v[1]); });
  check_op("divide_rows", {{4, 3}, {4, 1}},
           [](TapeD&, const std::vector<V>& v) { return ad::divide_rows(v[0], v[1]); }, 0.5, 2);
}

TEST(FiniteDifference, Spatial) {
  check_op("conv2d", {{6, 5, 2}, {3, 3, 2, 3}, {3}},
           [](TapeD&, const std::vector<V>& v) { return ad::conv2d(v[0], v[1], v[2]); });
  check_op("conv2d_s2", {{7, 6, 2}, {3, 3, 2, 2}, {2}},
           [](TapeD&, const std::vector<V>& v) { return ad::conv2d(v[0], v[1], v[2], 2); });
  check_op("conv2d_1x1", {{4, 4, 3}, {1, 1, 3, 2}, {2}},
           [](TapeD&, const std::vector<V>& v) { return ad::conv2d(v[0], v[1], v[2]); });
  check_op("avg_pool", {{8, 4, 2}}, [](TapeD&, const std::vector<V>& v) { return ad::avg_pool(v[0], 2); });
  check_op("upsample", {{3, 2, 2}},
           [](TapeD&, const std::vector<V>& v) { return ad::upsample_nearest(v[0], 2); });
  check_op("concat", {{3, 3, 2}, {3, 3, 1}},
           [](TapeD&, const std::vector<V>& v) { return ad::concat_channels(v[0], v[1]); });
  check_op("gap", {{4, 3, 2}}, [](TapeD&, const std::vector<V>& v) { return ad::gap(v[0]); });
  check_op("expand", {{3}}, [](TapeD&, const std::vector<V>& v) { return ad::expand(v[0], 2, 3); });
}

TEST(FiniteDifference, MemoryOps) {
  check_op("state_summary", {{3, 4}}, [](TapeD&, const std::vector<V>& v) { return ad::state_summary(v[0]); });
  check_op("kpff", {{4, 4, 2}, {4, 4, 2}, {3, 3, 2, 2}, {2}},
           [](TapeD&, const std::vector<V>& v) { return ad::kpff(v[0], v[1], v[2], v[3]); });
  for (auto strategy : kAllStrategies) {
    check_op(std::string(strategy_name(strategy)).c_str(), {{3, 4}, {5, 4}, {5, 3}, {1}, {1}},
             [strategy](TapeD&, const std::vector<V>& v) {
               return ad::memory_write(v[0], v[1], v[2], ad::sigmoid(v[3]), ad::sigmoid(v[4]),
                                       ad::MemoryWriteOptions{strategy, true});
             });
  }
  check_op("key_accumulate", {{4}, {5, 4}, {1}}, [](TapeD&, const std::vector<V>& v) {
    V decay = ad::sigmoid(v[2]);
    return ad::key_accumulate(v[0], v[1], &decay, true);
  });
}

TEST(FiniteDifference, Losses) {
  Rng rng(3);
  Tensor64 target({4, 4, 1});
  for (auto& t : target.data()) t = rng.bernoulli(0.4) ? 1.0 : 0.0;
  check_op("bce", {{4, 4, 1}}, [&](TapeD&, const std::vector<V>& v) { return ad::bce_with_logits(v[0], target); },
           -3, 3);
  check_op("dice", {{4, 4, 1}}, [&](TapeD&, const std::vector<V>& v) { return ad::soft_dice_loss(v[0], target); },
           -3, 3);
}

TEST(FiniteDifference, SixFrameGatedRecurrence) {
  // Gates depend on the state through the projection, so every transition
  // feeds back into later writes.
  for (std::uint64_t instance = 0; instance < 3; ++instance) {
    Rng rng(instance, 0x66);
    ParameterSet<double> params{{"w_alpha", random_tensor<double>({7}, rng)},
                                {"w_beta", random_tensor<double>({7}, rng)},
                                {"keys", random_tensor<double>({6, 2, 4}, rng)},
                                {"values", random_tensor<double>({6, 2, 3}, rng)},
                                {"query", random_tensor<double>({2, 4}, rng)}};
    const auto report = finite_difference_check(params, [](TapeD& tape, const std::vector<V>& v) {
      V S = tape.constant(Tensor64({3, 4}));
      for (std::size_t t = 0; t < 6; ++t) {
        V summary = ad::state_summary(S);
        V a = ad::sigmoid(ad::add(ad::dot(v[0], summary), tape.constant(Tensor64({1}, 2.0))));
        V b = ad::sigmoid(ad::dot(v[1], summary));
        V sel = tape.constant(frame_selector(t));
        V k = ad::matmul(sel, ad::reshape(v[2], {12, 4}));
        V val = ad::matmul(sel, ad::reshape(v[3], {12, 3}));
        S = ad::memory_write(S, k, val, a, b, ad::MemoryWriteOptions{UpdateStrategy::kGDR, true});
      }
      return ad::sum(ad::matmul_nt(ad::phi(v[4]), S));
    });
    EXPECT_LE(report.worst(), kGradCheckTolerance) << "instance " << instance;
  }
}

TEST(HandGradient, DeltaWriteThenReadout) {
  Rng rng(4);
  Tensor64 k({1, 4}, {0.5, -0.5, 0.5, 0.5});
  auto v = random_tensor<double>({1, 3}, rng);
  auto q = random_tensor<double>({1, 4}, rng);
  const double beta = 0.3;
  TapeD tape;
  V S = tape.constant(Tensor64({3, 4}));
  V vv = tape.parameter(v);
  V bb = tape.parameter(Tensor64({1}, beta));
  V out = ad::memory_write(S, tape.constant(k), vv, tape.constant(Tensor64({1}, 0.9)), bb,
                           ad::MemoryWriteOptions{UpdateStrategy::kNoAlpha, false});
  V loss = ad::sum(ad::matmul_nt(ad::phi(tape.constant(q)), out));
  tape.backward(loss);
  double kq = 0, vs = 0;
  for (std::size_t j = 0; j < 4; ++j) kq += k[j] * phi(q[j]);
  for (double x : v.data()) vs += x;
  EXPECT_NEAR(loss.value()[0], beta * vs * kq, 1e-14);
  EXPECT_NEAR(tape.grad(bb.id)[0], vs * kq, 1e-14);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(tape.grad(vv.id)[i], beta * kq, 1e-14);
}

TEST(ModelGradient, EveryStrategyPassesFiniteDifferences) {
  for (auto strategy : kAllStrategies) {
    const auto r = model_gradcheck(strategy, false, true, 7);
    EXPECT_EQ(r.entries.size(), 20u);
    EXPECT_LE(r.worst(), kGradCheckTolerance) << strategy_name(strategy);
  }
  EXPECT_LE(model_gradcheck(UpdateStrategy::kGDR, true, true, 8).worst(), kGradCheckTolerance);
  EXPECT_LE(model_gradcheck(UpdateStrategy::kGDR, false, false, 9).worst(), kGradCheckTolerance);
}

TEST(GradCheck, RelativeErrorFloor) {
  EXPECT_NEAR(relative_error(1.0, 1.1), 0.1 / 1.1, 1e-15);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 1e-9), 1e-9 / 1e-5);
}

TEST(Clip, ScalesOnlyAboveThreshold) {
  std::vector<Tensor64> g{Tensor64({2}, {3.0, 4.0}), Tensor64({1}, {0.0})};
  auto g2 = g;
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 10.0), 5.0);
  EXPECT_EQ(g, g2);
  std::vector<Tensor64> six{Tensor64({1}, {6.0})};
  EXPECT_DOUBLE_EQ(clip_global_norm(six, 3.0), 6.0);
  EXPECT_DOUBLE_EQ(six[0][0], 3.0);
  std::vector<Tensor64> one{Tensor64({1}, {1.0})};
  clip_global_norm(one, 3.0);
  EXPECT_EQ(one[0][0], 1.0);
  EXPECT_THROW(clip_global_norm(one, 0.0), std::invalid_argument);
}

TEST(Clip, NormOracleAndIdempotence) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Tensor64> g{random_tensor<double>({3, 4}, rng, -3, 3), random_tensor<double>({5}, rng, -3, 3)};
    double n2 = 0;
    for (const auto& t : g)
      for (double x : t.data()) n2 += x * x;
    EXPECT_NEAR(global_norm(g), std::sqrt(n2), 1e-12);
    clip_global_norm(g, 2.0);
    EXPECT_NEAR(global_norm(g), 2.0, 1e-12);
    auto once = g;
    clip_global_norm(g, 2.0);
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_LE(max_abs_diff(g[i], once[i]), 1e-15);
  }
}

TEST(AdamW, ZeroGradientNoDecayIsIdentity) {
  Rng rng(6);
  auto p = random_tensor<double>({5}, rng), p0 = p;
  Tensor64 m({5}), v({5});
  adamw_step(p, Tensor64({5}), m, v, AdamWConfig{1e-3, 0.0}, 1);
  EXPECT_EQ(p, p0);
}

TEST(AdamW, SingleStepMatchesFormula) {
  const AdamWConfig cfg{1e-3, 1e-2, 0.9, 0.999, 1e-8};
  Tensor64 p({2}, {0.5, -2.0}), m({2}), v({2});
  adamw_step(p, Tensor64({2}, 1.0), m, v, cfg, 1);
  for (double start : {0.5, -2.0}) {
    const double decayed = start * (1 - 1e-3 * 1e-2);
    const double mh = (0.1 * 1.0) / (1 - 0.9), vh = (0.001 * 1.0) / (1 - 0.999);
    const double expected = decayed - 1e-3 * mh / (std::sqrt(vh) + 1e-8);
    EXPECT_NEAR(p[start == 0.5 ? 0 : 1], expected, 1e-15);
  }
  EXPECT_NEAR(m[0], 0.1, 1e-15);
  EXPECT_NEAR(v[0], 0.001, 1e-15);
  EXPECT_THROW(adamw_step(p, Tensor64({2}), m, v, cfg, 0), std::invalid_argument);
}

TEST(AdamW, WeightDecayOnlyShrinks) {
  Tensor64 p({3}, {1.0, -2.0, 4.0}), m({3}), v({3});
  adamw_step(p, Tensor64({3}), m, v, AdamWConfig{0.1, 0.5}, 1);
  EXPECT_DOUBLE_EQ(p[0], 1.0 * (1 - 0.05));
  EXPECT_DOUBLE_EQ(p[2], 4.0 * (1 - 0.05));
}

TEST(AdamW, OptimizerTracksSteps) {
  ParameterSet<double> params{{"w", Tensor64({2}, 1.0)}};
  AdamW<double> opt(params, AdamWConfig{1e-2, 0.0});
  opt.step(params, {Tensor64({2}, {1.0, -1.0})});
  opt.step(params, {Tensor64({2}, {1.0, -1.0})});
  EXPECT_EQ(opt.steps_taken(), 2u);
  EXPECT_LT(params[0].value[0], 1.0);
  EXPECT_GT(params[0].value[1], 1.0);
  EXPECT_EQ(parameter_count(params), 2u);
}
