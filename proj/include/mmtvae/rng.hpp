#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace mmtvae {

// Deterministic random source. mt19937_64 is fully specified by the standard,
// but the standard distributions are not, so all value transforms live here.
// Identical seeds give identical streams on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), gen_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1), 53 mantissa bits.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n);

  // Standard normal via Box-Muller; second value is cached.
  double normal();

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Independent child stream: same (seed, id) always yields the same child.
  Rng fork(std::uint64_t stream_id) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 gen_;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace mmtvae
