#pragma once

#include <cstdint>
#include <initializer_list>

namespace mltr {

// SplitMix64 generator: 64-bit state, cheap to split into independent
// streams keyed by (step, sample, ...). Distribution code is written here
// rather than with <random> distributions, whose output is not specified
// bit-for-bit across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    return mix(state_);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), unbiased (rejection sampling).
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = (~std::uint64_t{0} / n) * n;
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Independent stream derived from the current state and `key`; does not
  // advance this generator.
  Rng split(std::uint64_t key) const { return Rng(mix(state_ ^ mix(key + 0x632BE59BD9B4E019ull))); }

  std::uint64_t state() const { return state_; }

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

// Deterministic seed for a keyed sub-stream, e.g. derive_seed(seed, {epoch}).
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t s = Rng::mix(seed + 0x9E3779B97F4A7C15ull);
  for (auto k : keys) s = Rng::mix(s ^ Rng::mix(k + 0xD1B54A32D192ED03ull));
  return s;
}

}  // namespace mltr
