#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

namespace soundprobe {

/// Engine used everywhere. The standard distributions are avoided because their
/// output is implementation-defined; the helpers below give identical streams
/// on every standard library.
using Rng = std::mt19937_64;

/// Sub-seed for (seed, purpose, index): FNV-1a over the purpose string mixed
/// with splitmix64.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose, std::uint64_t index = 0);

inline Rng make_rng(std::uint64_t seed, std::string_view purpose, std::uint64_t index = 0) {
  return Rng(derive_seed(seed, purpose, index));
}

/// Uniform on [0, 1) with 53 random bits.
double uniform01(Rng& rng);

/// Uniform on [lo, hi).
inline double uniform_real(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Unbiased uniform integer on [0, n). n must be positive.
std::uint64_t uniform_index(Rng& rng, std::uint64_t n);

/// Standard normal via Box-Muller (one draw per call, no cached state).
double standard_normal(Rng& rng);

template <class T>
void shuffle(std::vector<T>& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_index(rng, i));
    using std::swap;
    swap(items[i - 1], items[j]);
  }
}

}  // namespace soundprobe
