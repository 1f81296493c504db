#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace fm3d {

// Deterministic counter-based RNG built on splitmix64. Unlike the standard
// <random> engines/distributions the output stream is fixed by this header
// alone, so seeds reproduce bit-identical results on any platform.
class Rng {
public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n). n must be > 0.
  uint64_t below(uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller. Draws exactly two uniforms per call.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
  uint64_t state_;
};

namespace detail {

inline uint64_t mix_u64(uint64_t h, uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  h *= 0xff51afd7ed558ccdULL;
  h ^= h >> 33;
  return h;
}

inline uint64_t mix_str(uint64_t h, std::string_view s) {
  for (unsigned char c : s) h = mix_u64(h, c);
  return mix_u64(h, s.size());
}

inline uint64_t derive_impl(uint64_t h) { return h; }

template <typename First, typename... Rest>
uint64_t derive_impl(uint64_t h, First first, Rest... rest) {
  if constexpr (std::is_convertible_v<First, std::string_view>) {
    h = mix_str(h, std::string_view(first));
  } else {
    h = mix_u64(h, static_cast<uint64_t>(first));
  }
  return derive_impl(h, rest...);
}

} // namespace detail

// Derives an independent substream seed from a root seed and a path of
// integer/string ids, e.g. derive(seed, "init", name) or derive(seed, fold, epoch).
template <typename... Ids>
uint64_t derive(uint64_t seed, Ids... ids) {
  return detail::derive_impl(detail::mix_u64(0x6a09e667f3bcc909ULL, seed), ids...);
}

} // namespace fm3d
