#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace hcount {

/// Seed for a named pipeline stage: splitmix64 over (seed, FNV-1a(stage), index).
/// Every random stream in the project is derived this way, so a stage can be
/// replayed without running the ones before it.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage, std::uint64_t index = 0);

/// mt19937_64 with distribution code written out here rather than taken from
/// <random>, whose distributions differ between standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n); n must be positive.
  std::uint64_t below(std::uint64_t n);
  /// Uniform integer in [lo, hi].
  std::int64_t between(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo + 1)));
  }
  /// Standard normal via Box-Muller (one value per call).
  double normal();

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = below(i);
      std::swap(first[static_cast<std::ptrdiff_t>(i - 1)], first[static_cast<std::ptrdiff_t>(j)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace hcount
