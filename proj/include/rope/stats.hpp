#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace rope {

struct MeanStderr {
  double mean = 0.0;
  double stderr_ = 0.0;
  std::int64_t n = 0;
};

MeanStderr mean_stderr(std::span<const double> values);

// Survival function of the chi-square distribution (upper tail).
double chi2_sf(double x, double dof);

// Pearson chi-square test of observed counts against expected counts;
// returns the p-value.
double chi2_test_pvalue(std::span<const std::int64_t> observed,
                        std::span<const double> expected);

// Two-sample Kolmogorov-Smirnov statistic (sup distance between ECDFs).
double ks_statistic(std::span<const double> a, std::span<const double> b);

// Linear-interpolation sample quantile on a sorted vector, q in [0, 1].
double sorted_quantile(std::span<const double> sorted, double q);

// FNV-1a content hash, hex-encoded; used for provenance records.
std::uint64_t fnv1a(std::span<const unsigned char> bytes);
std::string content_hash_hex(std::span<const unsigned char> bytes);
std::string file_hash_hex(const std::string& path);

}  // namespace rope
