#pragma once

// Seeded random source with hand-rolled distributions so that streams are
// identical across standard libraries and platforms.

#include <cmath>
#include <cstdint>
#include <random>

namespace sparsetree {

struct Rng {
  explicit Rng(std::uint64_t seed) : seed_base(seed), engine(seed) {}

  std::uint64_t next() { return engine(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; draws two uniforms per call.
  double normal() {
    double u1 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(engine() % span);
  }

  // Deterministic substream derived from (seed, index) by bit mixing.
  Rng substream(std::uint64_t index) const {
    std::uint64_t x = seed_base ^ (0x9e3779b97f4a7c15ULL * (index + 1));
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    return Rng(x);
  }

  std::uint64_t seed_base;
  std::mt19937_64 engine;
};

}  // namespace sparsetree
