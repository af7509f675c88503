#include "rope/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "rope/parallel.hpp"
#include "rope/rng.hpp"
#include "rope/stats.hpp"

namespace rope {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

// ---------------------------------------------------------------------------
// PriorPosterior

PriorPosterior::PriorPosterior(Task task, std::int64_t n_observations)
    : task_(task), n_obs_(n_observations) {}

int PriorPosterior::theta_dim() const { return task_spec(task_).theta_dim; }

double PriorPosterior::log_prob(std::int64_t, std::span<const double> theta) const {
  return prior_log_density(task_, theta);
}

void PriorPosterior::sample(std::int64_t obs_index, std::int64_t n, std::uint64_t seed,
                            double* out) const {
  const TaskSpec& spec = task_spec(task_);
  auto rng = make_rng(mix_seed(seed, static_cast<std::uint64_t>(obs_index)), 41);
  for (std::int64_t i = 0; i < n; ++i)
    prior_sample_into(task_, rng, {out + i * spec.theta_dim, static_cast<std::size_t>(spec.theta_dim)});
}

// ---------------------------------------------------------------------------
// FlowPosterior

FlowPosterior::FlowPosterior(std::shared_ptr<const FlowModel> model,
                             std::vector<double> summaries, std::int64_t n_observations)
    : model_(std::move(model)), summaries_(std::move(summaries)), n_obs_(n_observations) {
  if (summaries_.size() != static_cast<std::size_t>(n_obs_ * model_->summary_dim))
    throw std::invalid_argument("FlowPosterior: summary table has wrong size");
}

std::span<const double> FlowPosterior::summary(std::int64_t obs_index) const {
  return {summaries_.data() + obs_index * model_->summary_dim,
          static_cast<std::size_t>(model_->summary_dim)};
}

double FlowPosterior::log_prob(std::int64_t obs_index, std::span<const double> theta) const {
  return flow_log_prob(*model_, theta, summary(obs_index), 1)[0];
}

void FlowPosterior::sample(std::int64_t obs_index, std::int64_t n, std::uint64_t seed,
                           double* out) const {
  const auto draws = flow_sample(*model_, summary(obs_index), n,
                                 mix_seed(seed, static_cast<std::uint64_t>(obs_index)));
  std::copy(draws.begin(), draws.end(), out);
}

// ---------------------------------------------------------------------------
// GaussianPosterior

GaussianPosterior::GaussianPosterior(std::vector<double> means, std::vector<double> log_vars,
                                     int theta_dim)
    : means_(std::move(means)), log_vars_(std::move(log_vars)), k_(theta_dim) {
  if (means_.size() != log_vars_.size() || means_.size() % static_cast<std::size_t>(k_) != 0)
    throw std::invalid_argument("GaussianPosterior: malformed mean/log-variance tables");
  n_obs_ = static_cast<std::int64_t>(means_.size()) / k_;
}

double GaussianPosterior::log_prob(std::int64_t obs_index, std::span<const double> theta) const {
  double lp = 0.0;
  for (int j = 0; j < k_; ++j) {
    const double mu = means_[static_cast<std::size_t>(obs_index * k_ + j)];
    const double lv = log_vars_[static_cast<std::size_t>(obs_index * k_ + j)];
    const double d = theta[static_cast<std::size_t>(j)] - mu;
    lp += -0.5 * (lv + d * d * std::exp(-lv) + std::log(2.0 * std::numbers::pi));
  }
  return lp;
}

void GaussianPosterior::sample(std::int64_t obs_index, std::int64_t n, std::uint64_t seed,
                               double* out) const {
  auto rng = make_rng(mix_seed(seed, static_cast<std::uint64_t>(obs_index)), 42);
  for (std::int64_t i = 0; i < n; ++i)
    for (int j = 0; j < k_; ++j) {
      const double mu = means_[static_cast<std::size_t>(obs_index * k_ + j)];
      const double sd = std::exp(0.5 * log_vars_[static_cast<std::size_t>(obs_index * k_ + j)]);
      out[i * k_ + j] = mu + sd * standard_normal(rng);
    }
}

// ---------------------------------------------------------------------------
// Metrics

LppResult compute_lpp(const PosteriorEstimate& estimate, const Dataset& test) {
  if (test.n == 0) throw std::invalid_argument("compute_lpp: empty test set");
  if (estimate.n_observations() != test.n)
    throw std::invalid_argument("compute_lpp: estimate covers " +
                                std::to_string(estimate.n_observations()) +
                                " observations, test set has " + std::to_string(test.n));
  std::vector<double> lp(static_cast<std::size_t>(test.n));
  parallel_for(test.n, [&](std::int64_t i) {
    lp[static_cast<std::size_t>(i)] = estimate.log_prob(i, test.theta_row(i));
  });
  LppResult r;
  std::vector<double> finite;
  finite.reserve(lp.size());
  for (double v : lp) {
    if (v == -kInf)
      ++r.n_neg_inf;
    else
      finite.push_back(v);
  }
  if (finite.empty()) throw std::runtime_error("compute_lpp: every test pair had -inf density");
  const auto ms = mean_stderr(finite);
  r.mean = ms.mean;
  r.stderr_ = ms.stderr_;
  r.n_finite = ms.n;
  return r;
}

namespace {

// Minimal central credible level containing the truth, from the one-sided
// rank r/M: level = |2 r/M - 1|.
double central_level(std::span<const double> samples, int k, int dim, double truth,
                     std::int64_t m) {
  std::int64_t rank = 0;
  for (std::int64_t s = 0; s < m; ++s)
    if (samples[static_cast<std::size_t>(s * k + dim)] < truth) ++rank;
  const double c = static_cast<double>(rank) / static_cast<double>(m);
  return std::fabs(2.0 * c - 1.0);
}

}  // namespace

double compute_acauc(const PosteriorEstimate& estimate, const Dataset& test,
                     int samples_per_pair, std::uint64_t seed) {
  if (samples_per_pair < 100)
    throw std::invalid_argument("compute_acauc: need at least 100 samples per pair");
  if (test.n == 0) throw std::invalid_argument("compute_acauc: empty test set");
  const int k = estimate.theta_dim();
  const std::int64_t n = test.n, m = samples_per_pair;

  std::vector<double> levels(static_cast<std::size_t>(n * k));
  parallel_for(n, [&](std::int64_t i) {
    std::vector<double> draws(static_cast<std::size_t>(m * k));
    estimate.sample(i, m, mix_seed(seed, 43), draws.data());
    const auto truth = test.theta_row(i);
    for (int j = 0; j < k; ++j)
      levels[static_cast<std::size_t>(i * k + j)] =
          central_level(draws, k, j, truth[static_cast<std::size_t>(j)], m);
  });

  double acauc = 0.0;
  std::vector<double> per_dim(static_cast<std::size_t>(n));
  for (int j = 0; j < k; ++j) {
    for (std::int64_t i = 0; i < n; ++i) per_dim[static_cast<std::size_t>(i)] = levels[static_cast<std::size_t>(i * k + j)];
    std::sort(per_dim.begin(), per_dim.end());
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i)
      acc += per_dim[static_cast<std::size_t>(i)] -
             static_cast<double>(i + 1) / static_cast<double>(n);
    acauc += acc / static_cast<double>(n);
  }
  return acauc / static_cast<double>(k);
}

CoverageCurve coverage_curve(const PosteriorEstimate& estimate, const Dataset& test,
                             std::span<const double> levels, int samples_per_pair,
                             std::uint64_t seed) {
  for (double a : levels)
    if (!(a > 0.0 && a < 1.0))
      throw std::invalid_argument("coverage_curve: levels must lie in (0, 1)");
  const int k = estimate.theta_dim();
  const std::int64_t n = test.n, m = samples_per_pair;
  std::vector<std::vector<std::int64_t>> hits(
      static_cast<std::size_t>(k), std::vector<std::int64_t>(levels.size(), 0));
  std::vector<std::vector<std::int64_t>> per_obs_hits(static_cast<std::size_t>(n));

  parallel_for(n, [&](std::int64_t i) {
    std::vector<double> draws(static_cast<std::size_t>(m * k));
    estimate.sample(i, m, mix_seed(seed, 44), draws.data());
    auto& mine = per_obs_hits[static_cast<std::size_t>(i)];
    mine.assign(static_cast<std::size_t>(k) * levels.size(), 0);
    std::vector<double> column(static_cast<std::size_t>(m));
    const auto truth = test.theta_row(i);
    for (int j = 0; j < k; ++j) {
      for (std::int64_t s = 0; s < m; ++s) column[static_cast<std::size_t>(s)] = draws[static_cast<std::size_t>(s * k + j)];
      std::sort(column.begin(), column.end());
      for (std::size_t li = 0; li < levels.size(); ++li) {
        const double a = levels[li];
        const double lo = sorted_quantile(column, (1.0 - a) / 2.0);
        const double hi = sorted_quantile(column, (1.0 + a) / 2.0);
        const double t = truth[static_cast<std::size_t>(j)];
        if (t >= lo && t <= hi) mine[static_cast<std::size_t>(j) * levels.size() + li] = 1;
      }
    }
  });
  for (std::int64_t i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j)
      for (std::size_t li = 0; li < levels.size(); ++li)
        hits[static_cast<std::size_t>(j)][li] +=
            per_obs_hits[static_cast<std::size_t>(i)][static_cast<std::size_t>(j) * levels.size() + li];

  CoverageCurve curve;
  curve.levels.assign(levels.begin(), levels.end());
  curve.coverage.resize(static_cast<std::size_t>(k));
  curve.averaged.assign(levels.size(), 0.0);
  for (int j = 0; j < k; ++j) {
    curve.coverage[static_cast<std::size_t>(j)].resize(levels.size());
    for (std::size_t li = 0; li < levels.size(); ++li) {
      const double c = static_cast<double>(hits[static_cast<std::size_t>(j)][li]) / static_cast<double>(n);
      curve.coverage[static_cast<std::size_t>(j)][li] = c;
      curve.averaged[li] += c / static_cast<double>(k);
    }
  }
  return curve;
}

}  // namespace rope
