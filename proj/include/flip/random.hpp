#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace flip {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent stream keyed by (seed, keys...). Used so that the randomness
/// of iteration t never depends on how many draws earlier iterations made.
inline Rng derive_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = splitmix64(seed);
  for (auto k : keys) h = splitmix64(h ^ splitmix64(k + 0x632be59bd9b4e019ULL));
  return Rng(h);
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// Uniform integer in [0, n).
inline long uniform_index(Rng& rng, long n) {
  return std::uniform_int_distribution<long>(0, n - 1)(rng);
}

/// Fisher-Yates with an explicit index draw per position.
template <typename Container>
void shuffle_in_place(Container& c, Rng& rng) {
  for (long i = static_cast<long>(c.size()) - 1; i > 0; --i) {
    const long j = uniform_index(rng, i + 1);
    using std::swap;
    swap(c[static_cast<std::size_t>(i)], c[static_cast<std::size_t>(j)]);
  }
}

}  // namespace flip
