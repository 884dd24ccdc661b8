#pragma once

#include <cstdint>

namespace stmix {

/// Deterministic 64-bit generator (splitmix64 mixer). The integer and
/// uniform streams are bit-identical for a given seed on any platform;
/// gaussian() goes through libm (log/cos/sin) and is reproducible on a
/// given toolchain.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Integer in [0, n), n >= 1.
  int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n)); }

  /// Standard normal via Box-Muller; the paired sample is cached.
  double gaussian();

  /// Derives an independent sub-stream seed; advances this stream once.
  std::uint64_t fork_seed() { return next_u64(); }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace stmix
