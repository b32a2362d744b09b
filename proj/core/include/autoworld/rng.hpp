#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace autoworld {

// Deterministic RNG used across the project. All randomness flows through
// this type so that a (seed, call sequence) pair fully determines every
// artifact. xoshiro-style splitmix for stream derivation, Box-Muller for
// normals; no dependence on libstdc++ distribution internals.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ^ 0x9e3779b97f4a7c15ull) {
    // Warm up so that small seeds do not produce correlated first draws.
    next_u64();
    next_u64();
  }

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in (0, 1]; never returns 0 so log() is always finite.
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) {
    return lo + (uniform() - 0x1.0p-53) * (hi - lo);
  }

  // Integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller (spare discarded to keep the stream
  // a pure function of the call count).
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::uint64_t state_;
};

// Derives an independent child seed from a base seed and a stream tag.
// Used to give every sampler candidate / pipeline stage its own stream.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base;
  z ^= 0xff51afd7ed558ccdull + (stream << 1);
  z = (z ^ (z >> 33)) * 0xff51afd7ed558ccdull;
  z ^= stream * 0xc4ceb9fe1a85ec53ull;
  z = (z ^ (z >> 33)) * 0xc4ceb9fe1a85ec53ull;
  return z ^ (z >> 33);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
  // FNV-1a over the tag, folded into the stream id.
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return derive_seed(base, h);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag,
                                 std::uint64_t index) {
  return derive_seed(derive_seed(base, tag), index + 1);
}

}  // namespace autoworld
