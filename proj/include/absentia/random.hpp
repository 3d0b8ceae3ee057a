#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace absentia {

/// SplitMix64 finalizer; derives well-spread seeds from structured keys.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1) + 0xBF58476D1CE4E5B9ULL * (c + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Seeded generator with distribution transforms fixed here rather than in
/// the standard library, so streams are identical across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do r = engine_(); while (r >= limit);
    return r % n;
  }
  std::int64_t range(std::int64_t lo, std::int64_t hi_inclusive) {
    return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
  }
  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[below(i)]);
  }
  /// Independent child stream, e.g. one per worker or per channel.
  Rng fork(std::uint64_t stream) { return Rng(engine_() ^ (0x9E3779B97F4A7C15ULL * (stream + 1))); }

 private:
  std::mt19937_64 engine_;
};

}  // namespace absentia
