#pragma once

#include <cstdint>
#include <random>

namespace avw2 {

// Mixes a base seed with stream tags into an independent 64-bit seed
// (splitmix64 finalizer over each tag).
std::uint64_t deriveSeed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0,
                         std::uint64_t c = 0);

// Portable random draws over std::mt19937_64. The standard distributions are
// implementation-defined, so the variates here are computed explicitly to keep
// generated corpora identical across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t bits() {
    return engine_();
  }
  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
  }
  bool bernoulli(double p) {
    return uniform() < p;
  }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  // Standard normal (Box-Muller, cached second variate).
  double normal();

 private:
  std::mt19937_64 engine_;
  bool hasSpare_ = false;
  double spare_ = 0.0;
};

} // namespace avw2
