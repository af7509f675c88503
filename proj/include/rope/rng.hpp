#pragma once

#include <cstdint>
#include <random>

namespace rope {

// All randomness in the library flows through these helpers so that a run is
// reproducible from its seeds alone. Distinct consumers of one logical seed
// (e.g. phase vs. sensor noise in a simulator) draw from separate substreams,
// so enabling one consumer never shifts the draws of another.

std::uint64_t splitmix64(std::uint64_t x);

// Derives a new seed from (seed, salt); salts are small local constants.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

// Generator for substream `stream` of `seed`.
std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream = 0);

double uniform_real(std::mt19937_64& g, double lo = 0.0, double hi = 1.0);
double standard_normal(std::mt19937_64& g);
std::uint64_t uniform_index(std::mt19937_64& g, std::uint64_t n);  // [0, n)
std::uint64_t poisson_draw(std::mt19937_64& g, double mean);
std::uint64_t binomial_draw(std::mt19937_64& g, std::uint64_t n, double p);

}  // namespace rope
