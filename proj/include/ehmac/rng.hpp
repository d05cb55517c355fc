#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace ehmac {

constexpr std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Seeded random stream. Distribution sampling is implemented in terms of
/// raw 64-bit draws only, so sequences are reproducible across standard
/// library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(splitmix64(seed)) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform draw in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller (cosine branch).
  double gaussian() {
    const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  /// Exponential with mean 1.
  double exponential() { return -std::log1p(-uniform()); }

  /// Unbiased draw from [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return x % n;
  }

  /// Named substream: decorrelated child stream for (tag, index).
  /// Workers that own distinct indices may draw concurrently.
  static Rng substream(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0) {
    std::uint64_t h = splitmix64(seed ^ fnv1a64(tag));
    h = splitmix64(h ^ (index * 0x9e3779b97f4a7c15ull + 1));
    return Rng(h);
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace ehmac
