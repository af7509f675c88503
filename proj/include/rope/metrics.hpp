#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "rope/dataset.hpp"
#include "rope/flow.hpp"

namespace rope {

// A posterior estimate over a fixed test set: per-observation log density and
// sampling. Implementations must be safe to call from multiple threads.
class PosteriorEstimate {
 public:
  virtual ~PosteriorEstimate() = default;
  virtual int theta_dim() const = 0;
  virtual std::int64_t n_observations() const = 0;
  virtual double log_prob(std::int64_t obs_index, std::span<const double> theta) const = 0;
  // Writes n x theta_dim draws, row-major.
  virtual void sample(std::int64_t obs_index, std::int64_t n, std::uint64_t seed,
                      double* out) const = 0;
};

// The analytic box prior as a (constant) posterior.
class PriorPosterior final : public PosteriorEstimate {
 public:
  PriorPosterior(Task task, std::int64_t n_observations);
  int theta_dim() const override;
  std::int64_t n_observations() const override { return n_obs_; }
  double log_prob(std::int64_t, std::span<const double> theta) const override;
  void sample(std::int64_t, std::int64_t n, std::uint64_t seed, double* out) const override;

 private:
  Task task_;
  std::int64_t n_obs_;
};

// Flow conditioned on one precomputed summary per observation (direct NPE,
// tuning-only, the synthetic-test reference, joint training).
class FlowPosterior final : public PosteriorEstimate {
 public:
  FlowPosterior(std::shared_ptr<const FlowModel> model, std::vector<double> summaries,
                std::int64_t n_observations);
  int theta_dim() const override { return model_->theta_dim; }
  std::int64_t n_observations() const override { return n_obs_; }
  double log_prob(std::int64_t obs_index, std::span<const double> theta) const override;
  void sample(std::int64_t obs_index, std::int64_t n, std::uint64_t seed,
              double* out) const override;
  std::span<const double> summary(std::int64_t obs_index) const;

 private:
  std::shared_ptr<const FlowModel> model_;
  std::vector<double> summaries_;  // n x l
  std::int64_t n_obs_;
};

// Independent Gaussian per dimension (the supervised MLP baseline).
class GaussianPosterior final : public PosteriorEstimate {
 public:
  GaussianPosterior(std::vector<double> means, std::vector<double> log_vars, int theta_dim);
  int theta_dim() const override { return k_; }
  std::int64_t n_observations() const override { return n_obs_; }
  double log_prob(std::int64_t obs_index, std::span<const double> theta) const override;
  void sample(std::int64_t obs_index, std::int64_t n, std::uint64_t seed,
              double* out) const override;

 private:
  std::vector<double> means_, log_vars_;  // n x k
  int k_;
  std::int64_t n_obs_;
};

struct LppResult {
  double mean = 0.0;
  double stderr_ = 0.0;
  std::int64_t n_finite = 0;
  std::int64_t n_neg_inf = 0;  // excluded from the mean, reported separately
};

LppResult compute_lpp(const PosteriorEstimate& estimate, const Dataset& test);

// Average coverage AUC from rank-based central credible levels; positive
// means overconfident, zero is marginally calibrated.
double compute_acauc(const PosteriorEstimate& estimate, const Dataset& test,
                     int samples_per_pair, std::uint64_t seed);

struct CoverageCurve {
  std::vector<double> levels;
  std::vector<std::vector<double>> coverage;  // [dim][level]
  std::vector<double> averaged;               // mean over dims, per level
};

// Empirical coverage of central (equal-tailed) sample-quantile intervals.
CoverageCurve coverage_curve(const PosteriorEstimate& estimate, const Dataset& test,
                             std::span<const double> levels, int samples_per_pair,
                             std::uint64_t seed);

}  // namespace rope
