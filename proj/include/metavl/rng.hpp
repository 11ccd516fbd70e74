#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace metavl {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Stream seed for (base, tags...): every sampled quantity gets its own
// stream so results do not depend on call order elsewhere.
template <class... Tags>
std::uint64_t derive_seed(std::uint64_t base, Tags... tags) {
  std::uint64_t h = splitmix64(base);
  ((h = splitmix64(h ^ static_cast<std::uint64_t>(tags))), ...);
  return h;
}

template <class... Tags>
Rng make_rng(std::uint64_t base, Tags... tags) {
  return Rng(derive_seed(base, tags...));
}

inline std::uint64_t tag(std::string_view s) { return fnv1a64(s); }

// Uniform integer in [lo, hi]. Implemented directly so streams are identical
// across standard library implementations.
inline std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi) {
  const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
  if (span == 0) return static_cast<std::int64_t>(rng());
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  std::uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return lo + static_cast<std::int64_t>(r % span);
}

inline double uniform_real(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Box-Muller, one draw per call.
inline double normal(Rng& rng) {
  double u1 = uniform_real(rng);
  const double u2 = uniform_real(rng);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

template <class Vec>
void shuffle(Vec& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(i) - 1));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace metavl
