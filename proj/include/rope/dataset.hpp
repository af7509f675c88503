#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "rope/simulators.hpp"

namespace rope {

enum class SplitRole { train, calibration, calibration_val, test };

// Parameter/observation pairs stored as flat row-major matrices. All pairs
// share one task and provenance.
struct Dataset {
  Task task = Task::pendulum;
  Provenance provenance = Provenance::simulated;
  SplitRole role = SplitRole::train;
  std::int64_t n = 0;
  std::int64_t theta_dim = 0;
  std::int64_t obs_dim = 0;
  std::uint64_t seed = 0;
  std::vector<double> theta;  // n x theta_dim
  std::vector<double> obs;    // n x obs_dim

  std::span<const double> theta_row(std::int64_t i) const {
    return {theta.data() + i * theta_dim, static_cast<std::size_t>(theta_dim)};
  }
  std::span<const double> obs_row(std::int64_t i) const {
    return {obs.data() + i * obs_dim, static_cast<std::size_t>(obs_dim)};
  }
};

struct ThetaBox {
  std::vector<double> lo, hi;
};

// Draws n pairs theta ~ prior, x = S(theta, .); `theta_box` overrides the
// sampling box (used by the prior-misspecification probe).
Dataset generate_dataset(Task task, std::int64_t n, std::uint64_t seed, bool misspecified,
                         const std::optional<ThetaBox>& theta_box = std::nullopt);

// Binary table: header (task, provenance, role, k, d, n, seed) followed by
// n rows of k + d doubles; round-trips bit-exactly.
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

struct Splits {
  Dataset calibration;      // 80% of the requested calibration pairs
  Dataset calibration_val;  // the held-out 20%
  Dataset test;
};

// Disjoint calibration/validation/test indices from one labeled pool; the
// validation share is n_calibration / 5.
Splits make_splits(const Dataset& real_pairs, std::int64_t n_calibration, std::int64_t n_test,
                   std::uint64_t seed);

Dataset subset(const Dataset& ds, std::span<const std::int64_t> indices, SplitRole role);

}  // namespace rope
