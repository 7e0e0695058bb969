#include "plrank/random.hpp"

#include <cmath>
#include <numbers>

#include "plrank/errors.hpp"

namespace plrank {

std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view tag,
                          std::string_view instance_id, std::string_view item_id) {
  std::uint64_t h = mix64(master);
  h = mix64(h ^ hash_string(tag));
  h = mix64(h ^ hash_string(instance_id));
  h = mix64(h ^ hash_string(item_id));
  return h;
}

double RandomStream::normal(double mean, double stddev) {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t RandomStream::below(std::size_t n) {
  PLRANK_EXPECT(n > 0, "below(n) requires n > 0");
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
  std::uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return static_cast<std::size_t>(x % bound);
}

std::size_t RandomStream::categorical(std::span<const double> weights) {
  PLRANK_EXPECT(!weights.empty(), "categorical over an empty support");
  double total = 0.0;
  for (double w : weights) total += w;
  PLRANK_EXPECT(total > 0.0 && std::isfinite(total), "categorical weights must have positive finite mass");
  const double u = uniform() * total;
  double acc = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] <= 0.0) continue;
    acc += weights[i];
    last_positive = i;
    if (u < acc) return i;
  }
  return last_positive;
}

std::size_t RandomStream::geometric(double p) {
  PLRANK_EXPECT(p > 0.0 && p <= 1.0, "geometric p must be in (0, 1]");
  if (p == 1.0) return 0;
  double u = uniform();
  while (u <= 0.0) u = uniform();
  return static_cast<std::size_t>(std::floor(std::log(u) / std::log1p(-p)));
}

}  // namespace plrank
