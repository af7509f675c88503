#include <algorithm>
#include <cmath>
#include <numbers>

#include "doctest.h"
#include "rope/metrics.hpp"
#include "rope/rng.hpp"

using namespace rope;

namespace {

// Deterministic point mass strictly below the truth in every dimension.
class DiracPosterior final : public PosteriorEstimate {
 public:
  DiracPosterior(const Dataset& test, double offset) : test_(&test), offset_(offset) {}
  int theta_dim() const override { return static_cast<int>(test_->theta_dim); }
  std::int64_t n_observations() const override { return test_->n; }
  double log_prob(std::int64_t, std::span<const double>) const override { return 0.0; }
  void sample(std::int64_t obs_index, std::int64_t n, std::uint64_t, double* out) const override {
    const auto truth = test_->theta_row(obs_index);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < test_->theta_dim; ++j)
        out[i * test_->theta_dim + j] = truth[static_cast<std::size_t>(j)] - offset_;
  }

 private:
  const Dataset* test_;
  double offset_;
};

// Samples pinned to extreme values on both sides: the truth is inside every
// central credible interval.
class AlwaysCoverPosterior final : public PosteriorEstimate {
 public:
  explicit AlwaysCoverPosterior(const Dataset& test) : test_(&test) {}
  int theta_dim() const override { return static_cast<int>(test_->theta_dim); }
  std::int64_t n_observations() const override { return test_->n; }
  double log_prob(std::int64_t, std::span<const double>) const override { return 0.0; }
  void sample(std::int64_t, std::int64_t n, std::uint64_t, double* out) const override {
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < test_->theta_dim; ++j)
        out[i * test_->theta_dim + j] = i % 2 == 0 ? -1e12 : 1e12;
  }

 private:
  const Dataset* test_;
};

class ConstantEvaluator final : public PosteriorEstimate {
 public:
  ConstantEvaluator(std::vector<double> values, int k) : values_(std::move(values)), k_(k) {}
  int theta_dim() const override { return k_; }
  std::int64_t n_observations() const override { return static_cast<std::int64_t>(values_.size()); }
  double log_prob(std::int64_t i, std::span<const double>) const override {
    return values_[static_cast<std::size_t>(i)];
  }
  void sample(std::int64_t, std::int64_t, std::uint64_t, double*) const override {}

 private:
  std::vector<double> values_;
  int k_;
};

}  // namespace

TEST_CASE("lpp") {
  const Dataset test = generate_dataset(Task::pendulum, 200, 5, true);

  SUBCASE("prior on pendulum is the analytic constant with zero stderr") {
    PriorPosterior prior(Task::pendulum, test.n);
    const auto r = compute_lpp(prior, test);
    CHECK(r.mean == doctest::Approx(-std::log(28.5)).epsilon(1e-13));
    CHECK(r.stderr_ < 1e-12);
    CHECK(r.n_neg_inf == 0);
    CHECK(r.n_finite == 200);
  }
  SUBCASE("gaussian at the mean") {
    // evaluator N(theta_i, I) scored at theta_i gives -log(2 pi) per pair
    std::vector<double> means = test.theta;
    std::vector<double> log_vars(means.size(), 0.0);
    GaussianPosterior g(means, log_vars, 2);
    const auto r = compute_lpp(g, test);
    CHECK(r.mean == doctest::Approx(-std::log(2.0 * std::numbers::pi)).epsilon(1e-12));
  }
  SUBCASE("-inf pairs are excluded and counted") {
    std::vector<double> values(static_cast<std::size_t>(test.n), -1.0);
    values[3] = -std::numeric_limits<double>::infinity();
    values[7] = -std::numeric_limits<double>::infinity();
    ConstantEvaluator e(values, 2);
    const auto r = compute_lpp(e, test);
    CHECK(r.n_neg_inf == 2);
    CHECK(r.n_finite == test.n - 2);
    CHECK(r.mean == doctest::Approx(-1.0));
  }
  SUBCASE("empty test set is an error") {
    Dataset empty = test;
    empty.n = 0;
    empty.theta.clear();
    empty.obs.clear();
    PriorPosterior prior(Task::pendulum, 0);
    CHECK_THROWS_AS(compute_lpp(prior, empty), std::invalid_argument);
  }
  SUBCASE("invariant to test-set ordering") {
    PriorPosterior prior(Task::pendulum, test.n);
    const auto a = compute_lpp(prior, test);
    Dataset reversed = test;
    for (std::int64_t i = 0; i < test.n; ++i) {
      std::copy_n(test.theta.begin() + (test.n - 1 - i) * 2, 2, reversed.theta.begin() + i * 2);
      std::copy_n(test.obs.begin() + (test.n - 1 - i) * test.obs_dim, test.obs_dim,
                  reversed.obs.begin() + i * test.obs_dim);
    }
    const auto b = compute_lpp(prior, reversed);
    CHECK(a.mean == doctest::Approx(b.mean).epsilon(1e-13));
  }
}

TEST_CASE("acauc oracles") {
  const Dataset test = generate_dataset(Task::pendulum, 2000, 9, true);

  SUBCASE("prior as posterior is calibrated") {
    PriorPosterior prior(Task::pendulum, test.n);
    const double a = compute_acauc(prior, test, 1000, 3);
    CHECK(std::fabs(a) < 0.02);
  }
  SUBCASE("point mass away from the truth is maximally overconfident") {
    DiracPosterior dirac(test, 0.01);
    const double a = compute_acauc(dirac, test, 1000, 3);
    CHECK(a == doctest::Approx(0.5).epsilon(0.01));
  }
  SUBCASE("point mass on the other side gives the same sign") {
    DiracPosterior dirac(test, -0.01);
    const double a = compute_acauc(dirac, test, 1000, 3);
    CHECK(a == doctest::Approx(0.5).epsilon(0.01));
  }
  SUBCASE("always-covering posterior is maximally underconfident") {
    AlwaysCoverPosterior cover(test);
    const double a = compute_acauc(cover, test, 1000, 3);
    CHECK(a == doctest::Approx(-0.5).epsilon(0.01));
  }
  SUBCASE("sample count guard") {
    PriorPosterior prior(Task::pendulum, test.n);
    CHECK_THROWS_AS(compute_acauc(prior, test, 0, 1), std::invalid_argument);
    CHECK_THROWS_AS(compute_acauc(prior, test, 99, 1), std::invalid_argument);
  }
}

TEST_CASE("coverage curves") {
  const Dataset test = generate_dataset(Task::pendulum, 2000, 11, true);
  const std::vector<double> levels{0.1, 0.3, 0.5, 0.7, 0.9};

  SUBCASE("prior-as-posterior tracks the diagonal") {
    PriorPosterior prior(Task::pendulum, test.n);
    const auto curve = coverage_curve(prior, test, levels, 1000, 5);
    for (std::size_t li = 0; li < levels.size(); ++li)
      CHECK(std::fabs(curve.averaged[li] - levels[li]) < 0.03);
  }
  SUBCASE("dirac posterior never covers") {
    DiracPosterior dirac(test, 0.01);
    const auto curve = coverage_curve(dirac, test, levels, 200, 5);
    for (double c : curve.averaged) CHECK(c == 0.0);
  }
  SUBCASE("curves are monotone in the level") {
    PriorPosterior prior(Task::pendulum, test.n);
    const auto curve = coverage_curve(prior, test, levels, 300, 5);
    for (std::size_t li = 1; li < levels.size(); ++li)
      CHECK(curve.averaged[li] >= curve.averaged[li - 1]);
  }
  SUBCASE("levels outside (0,1) are rejected") {
    PriorPosterior prior(Task::pendulum, test.n);
    const std::vector<double> bad{0.0, 0.5};
    CHECK_THROWS_AS(coverage_curve(prior, test, bad, 200, 5), std::invalid_argument);
  }
}
