#pragma once

#include <cmath>
#include <cstdint>

namespace monohom {

/// Counter-based random numbers: every draw is a pure function of
/// (root seed, sample index, lattice site, salt), so sampling is bitwise
/// reproducible and independent of thread count and evaluation order.
namespace rng {

/// SplitMix64 finalizer (Stafford mix 13); bijective 64 -> 64 mixer.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

struct Key {
  std::uint64_t root = 0;
  std::uint64_t sample = 0;
};

/// Combined state for one lattice site of one sample.  Site coordinates are
/// lattice indices per axis (absolute, so grids of different extent sharing
/// index space share the draw, which realizes coupled sampling).
inline std::uint64_t site_state(Key k, std::int64_t i0, std::int64_t i1,
                                std::int64_t i2, std::uint64_t salt) {
  std::uint64_t h = mix64(k.root);
  h = mix64(h ^ (0x100000001b3ull * k.sample + 0x9ddfea08eb382d69ull));
  h = mix64(h ^ static_cast<std::uint64_t>(i0));
  h = mix64(h ^ static_cast<std::uint64_t>(i1) ^ 0x94d049bb133111ebull);
  h = mix64(h ^ static_cast<std::uint64_t>(i2) ^ 0xff51afd7ed558ccdull);
  return h ^ (0xc4ceb9fe1a85ec53ull * salt);
}

/// Uniform double in (0, 1].
inline double uniform(std::uint64_t state) {
  return (static_cast<double>(state >> 11) + 1.0) * 0x1p-53;
}

/// Standard normal via Box-Muller on two decorrelated substreams.
inline double site_normal(Key k, std::int64_t i0, std::int64_t i1,
                          std::int64_t i2, std::uint64_t salt) {
  const std::uint64_t s = site_state(k, i0, i1, i2, salt);
  const double u1 = uniform(mix64(s ^ 0x2545f4914f6cdd1dull));
  const double u2 = uniform(mix64(s ^ 0x27220a95fe1dbf9bull));
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace rng
}  // namespace monohom
