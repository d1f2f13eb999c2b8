#pragma once

#include <cstdint>

namespace gdkvm {

// Counter-based generator: the n-th draw is a pure function of (seed, stream, n),
// so a stream can be split or replayed without shared state, and results do
// not depend on evaluation order across threads.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }
  double normal();
  // Gamma(shape, scale = 1).
  double gamma(double shape);

  // Independent generator keyed by this generator's seed and `stream`.
  Rng fork(std::uint64_t stream) const { return Rng(seed_, stream_ * 0x100000001B3ull + stream + 1); }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x);

}  // namespace gdkvm
