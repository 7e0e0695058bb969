#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

namespace plrank {

/// 64-bit FNV-1a. Used to turn string identifiers into stream keys.
std::uint64_t hash_string(std::string_view s);

/// SplitMix64 finalizer; a bijective mixer on 64-bit words.
std::uint64_t mix64(std::uint64_t x);

/// Derives a child seed from a master seed and a key tuple
/// (purpose tag, instance id, item id). Equal keys give equal seeds
/// regardless of call order, which is what makes per-item rollouts
/// independent of candidate presentation order.
std::uint64_t derive_seed(std::uint64_t master, std::string_view tag,
                          std::string_view instance_id = {},
                          std::string_view item_id = {});

/// A seeded pseudo-random stream. Values are owned per call site; the
/// sampling helpers below do not depend on implementation-defined
/// <random> distributions, so output is reproducible across toolchains.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : engine_(seed) {}

  static RandomStream keyed(std::uint64_t master, std::string_view tag,
                            std::string_view instance_id = {},
                            std::string_view item_id = {}) {
    return RandomStream(derive_seed(master, tag, instance_id, item_id));
  }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Box-Muller; one normal per call.
  double normal(double mean = 0.0, double stddev = 1.0);

  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);

  /// Index drawn proportionally to non-negative weights.
  std::size_t categorical(std::span<const double> weights);

  bool bernoulli(double p) { return uniform() < p; }

  /// Geometric number of failures before the first success, p in (0, 1].
  std::size_t geometric(double p);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace plrank
