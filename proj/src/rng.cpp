#include "genpred/rng.hpp"

namespace genpred {

std::uint64_t SplitMix64::below(std::uint64_t n) {
  // Lemire-style threshold rejection on the low end.
  const std::uint64_t threshold = (0 - n) % n;
  for (;;) {
    std::uint64_t r = next_u64();
    if (r >= threshold) return r % n;
  }
}

std::size_t SplitMix64::categorical(std::span<const double> probs) {
  double u = uniform01();
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  // Rounding left u above the cumulative sum: take the last nonzero entry.
  for (std::size_t i = probs.size(); i > 0; --i)
    if (probs[i - 1] > 0.0) return i - 1;
  return probs.size() - 1;
}

std::uint64_t mix64(std::uint64_t x) {
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  return mix64(mix64(base + 0x9E3779B97F4A7C15ULL) ^ (index * 0xD1B54A32D192ED03ULL + 1));
}

}  // namespace genpred
