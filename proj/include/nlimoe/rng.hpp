#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace nlimoe {

/// Counter-based splittable generator.
///
/// Every draw is `mix(key + counter * golden)`, so a stream is fully
/// determined by its key and the number of draws taken from it. `split`
/// derives an independent child key, which lets callers address a stream by
/// role (step, example, expert) instead of by call order. All arithmetic is
/// on uint64_t, so sequences are identical on every platform.
class CounterRng {
 public:
  static constexpr std::string_view algorithm = "splitmix64-ctr";

  explicit CounterRng(std::uint64_t seed = 0) : seed_(seed), key_(mix(seed ^ kSeedSalt)) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t draws() const { return counter_; }

  std::uint64_t next_u64() {
    ++counter_;
    return mix(key_ + counter_ * kGolden);
  }

  /// Uniform double in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  /// Child generator for the given stream id. Does not advance this one.
  CounterRng split(std::uint64_t stream) const {
    CounterRng child;
    child.seed_ = seed_;
    child.key_ = mix(key_ ^ mix(stream + kGolden));
    return child;
  }

 private:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
  static constexpr std::uint64_t kSeedSalt = 0xD1B54A32D192ED03ULL;

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_ = 0;
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

/// Fisher-Yates shuffle driven by CounterRng (std::shuffle is not portable).
template <class RandomIt>
void shuffle(RandomIt first, RandomIt last, CounterRng& rng) {
  const auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) {
    const auto j = rng.below(i);
    using std::swap;
    swap(first[i - 1], first[j]);
  }
}

}  // namespace nlimoe
