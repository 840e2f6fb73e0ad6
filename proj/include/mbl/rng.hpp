#pragma once

// Deterministic random number generation.
//
// Every random draw in the library flows through SplitMix64 with hand-rolled
// conversions to doubles. The standard <random> distributions are
// implementation-defined, which would break the bit-for-bit reproducibility
// the result files promise, so they are deliberately not used.

#include <cmath>
#include <cstdint>
#include <numbers>

namespace mbl {

// SplitMix64 (Steele, Lea, Flood ACM 2014): one 64-bit mixing stage per draw.
// Passes BigCrush, trivially seedable, and identical on every platform.
class SplitMix64 {
 public:
  constexpr explicit SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

  constexpr std::uint64_t next() noexcept {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform on [0, 1): top 53 bits scaled by 2^-53.
  double uniform01() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Uniform on (0, 1]: avoids log(0) in Box-Muller.
  double uniform01_open0() noexcept {
    return static_cast<double>((next() >> 11) + 1) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform01(); }

  // Standard normal via Box-Muller; consumes two draws, no cached second
  // value so the consumed-draw count per call is fixed.
  double normal() noexcept {
    const double u1 = uniform01_open0();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Rademacher variate (+1 or -1 with equal probability).
  double sign() noexcept { return (next() >> 63) ? 1.0 : -1.0; }

 private:
  std::uint64_t state_;
};

// Derives the seed for stream `stream` of a base seed: perturb the base by a
// stream-dependent odd multiplier of the SplitMix64 increment, then apply one
// mixing stage. Distinct streams of one base are statistically independent.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) noexcept {
  SplitMix64 g(base ^ (0x9e3779b97f4a7c15ull * (stream + 1)));
  return g.next();
}

}  // namespace mbl
