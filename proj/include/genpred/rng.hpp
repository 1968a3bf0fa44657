#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>

namespace genpred {

// SplitMix64 (Steele, Lea & Flood 2014). This is the only random source in
// the project; every stream is identified by a 64-bit seed, so results are
// stable across compilers and standard libraries. Do not change the
// constants: forged datasets and pinned test values depend on them.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform integer in [0, n), unbiased (rejection sampling). n must be > 0.
  std::uint64_t below(std::uint64_t n);

  // Sample an index from a discrete distribution given by probs (sums to ~1).
  std::size_t categorical(std::span<const double> probs);

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

// Finalizer of SplitMix64 applied to a single word.
std::uint64_t mix64(std::uint64_t x);

// Child seed derivation: seed for stream `index` under `base`. Used for
// per-agent and per-environment streams so that worker scheduling can never
// reorder randomness.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

}  // namespace genpred
