#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <string_view>
#include <vector>

namespace fada {

// Seed mixer used for deriving per-node / per-purpose streams.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Deterministic random stream. The engine is std::mt19937_64 (bit-exact per
/// the standard); every transform below is written out explicitly so draws
/// are reproducible across platforms and library versions.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : engine_(seed) {}

  /// Child stream keyed by (root, label, index). Used for node streams:
  /// derive(global_seed, "node", node_id).
  static RngStream derive(std::uint64_t root, std::string_view label,
                          std::uint64_t index = 0) {
    return RngStream(splitmix64(root ^ splitmix64(fnv1a64(label) + index)));
  }

  std::uint64_t raw() { return engine_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(raw() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Standard normal via Box-Muller. Two raw draws per value, no cached
  /// spare, so the stream position depends only on the call count.
  double normal() {
    double u1 = 1.0 - uniform01();  // (0, 1]
    double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  /// Unbiased integer in [0, n). n must be positive.
  std::uint64_t uniform_index(std::uint64_t n) {
    const std::uint64_t lim = std::numeric_limits<std::uint64_t>::max() / n * n;
    std::uint64_t r;
    do {
      r = raw();
    } while (r >= lim);
    return r % n;
  }

  /// Fisher-Yates permutation of 0..n-1.
  std::vector<std::uint32_t> permutation(std::uint32_t n) {
    std::vector<std::uint32_t> p(n);
    for (std::uint32_t i = 0; i < n; ++i) p[i] = i;
    for (std::uint32_t i = n; i > 1; --i) {
      std::uint32_t j = static_cast<std::uint32_t>(uniform_index(i));
      std::swap(p[i - 1], p[j]);
    }
    return p;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace fada
