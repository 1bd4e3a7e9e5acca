#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace mjp {

/// xorshift64* generator (Vigna 2016), seeded through one splitmix64 step so
/// that seed 0 is usable. Every derived quantity below is defined in terms of
/// next_u64() only, which keeps fixtures reproducible in other languages:
///
///   uniform()  = (next_u64() >> 11) * 2^-53
///   normal()   = sqrt(-2 ln(1 - u1)) * cos(2 pi u2)   (two uniforms per call)
///   below(n)   = floor(uniform() * n)
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(splitmix64(seed)) {
    if (state_ == 0) state_ = 0x9E3779B97F4A7C15ull;
  }

  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
  }

  std::uint64_t next_u64() {
    state_ ^= state_ >> 12;
    state_ ^= state_ << 25;
    state_ ^= state_ >> 27;
    return state_ * 0x2545F4914F6CDD1Dull;
  }

  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(1.0 - u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n));
  }

  /// Inclusive integer range.
  int range(int lo, int hi) { return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo + 1))); }

 private:
  std::uint64_t state_;
};

/// Deterministic sub-stream seed for (base, stream) pairs.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return Rng::splitmix64(base ^ Rng::splitmix64(stream + 0x632BE59BD9B4E019ull));
}

}  // namespace mjp
