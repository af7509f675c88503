#include "rope/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace rope {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  return splitmix64(seed + 0x9E3779B97F4A7C15ULL * (salt + 1));
}

std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
  const std::uint64_t s = mix_seed(seed, stream);
  std::seed_seq seq{static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(s >> 32),
                    static_cast<std::uint32_t>(stream), 0x52504531u};
  return std::mt19937_64(seq);
}

// 53-bit mantissa draw in [0, 1).
static double unit_uniform(std::mt19937_64& g) {
  return static_cast<double>(g() >> 11) * 0x1.0p-53;
}

double uniform_real(std::mt19937_64& g, double lo, double hi) {
  return lo + (hi - lo) * unit_uniform(g);
}

double standard_normal(std::mt19937_64& g) {
  // Box-Muller; u1 kept strictly positive.
  const double u1 = (static_cast<double>(g() >> 11) + 1.0) * 0x1.0p-53;
  const double u2 = unit_uniform(g);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t uniform_index(std::mt19937_64& g, std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("uniform_index: n must be positive");
  const std::uint64_t limit = std::mt19937_64::max() - std::mt19937_64::max() % n;
  std::uint64_t v = g();
  while (v >= limit) v = g();
  return v % n;
}

std::uint64_t poisson_draw(std::mt19937_64& g, double mean) {
  if (!(mean >= 0.0)) throw std::invalid_argument("poisson_draw: mean must be nonnegative");
  if (mean == 0.0) return 0;
  // Sum of independent Poisson halves keeps Knuth's product method in a
  // range where exp(-mean) does not underflow.
  if (mean > 30.0) {
    const double half = mean / 2.0;
    return poisson_draw(g, half) + poisson_draw(g, mean - half);
  }
  const double threshold = std::exp(-mean);
  std::uint64_t k = 0;
  double prod = unit_uniform(g);
  while (prod > threshold) {
    ++k;
    prod *= unit_uniform(g);
  }
  return k;
}

std::uint64_t binomial_draw(std::mt19937_64& g, std::uint64_t n, double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("binomial_draw: p outside [0, 1]");
  if (n == 0 || p == 0.0) return 0;
  if (p == 1.0) return n;
  if (p > 0.5) return n - binomial_draw(g, n, 1.0 - p);
  // Geometric waiting times; expected cost O(n p).
  const double log1mp = std::log1p(-p);
  std::uint64_t count = 0;
  double position = 0.0;
  while (true) {
    const double u = (static_cast<double>(g() >> 11) + 1.0) * 0x1.0p-53;
    position += std::floor(std::log(u) / log1mp) + 1.0;
    if (position > static_cast<double>(n)) break;
    ++count;
  }
  return count;
}

}  // namespace rope
