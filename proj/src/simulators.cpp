#include "rope/simulators.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "rope/rng.hpp"

namespace rope {

namespace {

// Substream ids per simulator; keep stable so toggling one consumer (e.g.
// the damping draw) never shifts the others.
enum Stream : std::uint64_t {
  kPhase = 1,
  kDamping = 2,
  kNoise = 3,
  kEpidemic = 4,
  kCancerParents = 5,
  kStromal = 6,
  kDaughters = 7,
};

constexpr int kPendulumPoints = 200;
constexpr double kPendulumHorizon = 10.0;
constexpr int kSirDays = 365;
constexpr std::int64_t kSirPopulation = 100000;
constexpr std::int64_t kSirInitialInfected = 10;
constexpr double kCsDaughterSigma = 0.02;
constexpr double kCsRemovalRadius = 0.01;

const TaskSpec kSpecs[3] = {
    {Task::cs, "cs", 3, 4, 4, {5.0, 50.0, 0.0}, {50.0, 500.0, 10.0}},
    {Task::sir, "sir", 2, 6, 5, {0.05, 0.02}, {0.5, 0.25}},
    {Task::pendulum, "pendulum", 2, 200, 10, {0.0, 0.5}, {3.0, 10.0}},
};

void check_theta_dim(const TaskSpec& spec, std::span<const double> theta) {
  if (static_cast<int>(theta.size()) != spec.theta_dim)
    throw std::invalid_argument(std::string(spec.name) + ": expected " +
                                std::to_string(spec.theta_dim) + " parameters, got " +
                                std::to_string(theta.size()));
}

}  // namespace

const TaskSpec& task_spec(Task task) { return kSpecs[static_cast<int>(task)]; }

Task task_from_name(const std::string& name) {
  for (const auto& s : kSpecs)
    if (name == s.name) return s.id;
  throw std::invalid_argument("unknown task '" + name + "' (expected cs, sir or pendulum)");
}

void prior_sample_into(Task task, std::mt19937_64& rng, std::span<double> out) {
  const TaskSpec& spec = task_spec(task);
  if (static_cast<int>(out.size()) != spec.theta_dim)
    throw std::invalid_argument("prior_sample_into: bad output size");
  for (int j = 0; j < spec.theta_dim; ++j)
    out[static_cast<std::size_t>(j)] = uniform_real(rng, spec.theta_lo[static_cast<std::size_t>(j)],
                                                    spec.theta_hi[static_cast<std::size_t>(j)]);
}

ThetaVector prior_sample(Task task, std::uint64_t seed) {
  const TaskSpec& spec = task_spec(task);
  ThetaVector t{task, std::vector<double>(static_cast<std::size_t>(spec.theta_dim))};
  auto rng = make_rng(seed, 0);
  prior_sample_into(task, rng, t.values);
  return t;
}

double prior_log_density_box(std::span<const double> theta, std::span<const double> lo,
                             std::span<const double> hi) {
  if (theta.size() != lo.size() || lo.size() != hi.size())
    throw std::invalid_argument("prior_log_density_box: dimension mismatch");
  double log_volume = 0.0;
  for (std::size_t j = 0; j < theta.size(); ++j) {
    if (theta[j] < lo[j] || theta[j] > hi[j])
      return -std::numeric_limits<double>::infinity();
    log_volume += std::log(hi[j] - lo[j]);
  }
  return -log_volume;
}

double prior_log_density(Task task, std::span<const double> theta) {
  const TaskSpec& spec = task_spec(task);
  check_theta_dim(spec, theta);
  return prior_log_density_box(theta, spec.theta_lo, spec.theta_hi);
}

Observation simulate(Task task, std::span<const double> theta, std::uint64_t seed,
                     bool misspecified) {
  Observation obs{task, misspecified ? Provenance::real : Provenance::simulated, {}};
  switch (task) {
    case Task::pendulum:
      obs.values = pendulum_simulate(theta, seed, misspecified);
      break;
    case Task::sir:
      obs.values = sir_simulate(theta, seed, misspecified);
      break;
    case Task::cs:
      obs.values = cs_simulate(theta, seed, misspecified);
      break;
  }
  return obs;
}

// ---------------------------------------------------------------------------
// Pendulum

std::span<const double> pendulum_time_grid() {
  static const std::vector<double> grid = [] {
    std::vector<double> t(kPendulumPoints);
    for (int i = 0; i < kPendulumPoints; ++i)
      t[static_cast<std::size_t>(i)] =
          kPendulumHorizon * static_cast<double>(i) / (kPendulumPoints - 1);
    return t;
  }();
  return grid;
}

std::vector<double> pendulum_simulate(std::span<const double> theta, std::uint64_t seed,
                                      bool misspecified, const PendulumOptions& opts) {
  const TaskSpec& spec = task_spec(Task::pendulum);
  check_theta_dim(spec, theta);
  const double omega0 = theta[0], amplitude = theta[1];
  for (int j = 0; j < spec.theta_dim; ++j)
    if (theta[static_cast<std::size_t>(j)] < spec.theta_lo[static_cast<std::size_t>(j)] ||
        theta[static_cast<std::size_t>(j)] > spec.theta_hi[static_cast<std::size_t>(j)])
      throw std::invalid_argument("pendulum: theta outside prior support");

  double phase;
  if (opts.phase) {
    phase = *opts.phase;
  } else {
    auto rng = make_rng(seed, kPhase);
    phase = uniform_real(rng, -std::numbers::pi, std::numbers::pi);
  }
  double damping = 0.0;
  if (misspecified) {
    if (opts.damping) {
      damping = *opts.damping;
    } else {
      auto rng = make_rng(seed, kDamping);
      damping = uniform_real(rng, 0.0, 1.0);
    }
  }

  const auto grid = pendulum_time_grid();
  std::vector<double> x(kPendulumPoints);
  for (int i = 0; i < kPendulumPoints; ++i) {
    const double t = grid[static_cast<std::size_t>(i)];
    double v = amplitude * std::cos(omega0 * t + phase);
    if (misspecified) v *= std::exp(-damping * t);
    x[static_cast<std::size_t>(i)] = v;
  }
  if (opts.noise_sigma > 0.0) {
    auto rng = make_rng(seed, kNoise);
    for (auto& v : x) v += opts.noise_sigma * standard_normal(rng);
  }
  return x;
}

// ---------------------------------------------------------------------------
// SIR

SirTrajectory sir_trajectory(double beta, double gamma, std::uint64_t seed) {
  if (beta < 0.0 || gamma < 0.0)
    throw std::invalid_argument("sir: rates must be nonnegative");
  auto rng = make_rng(seed, kEpidemic);
  SirTrajectory traj;
  traj.susceptible.reserve(kSirDays);
  traj.infected.reserve(kSirDays);
  traj.recovered.reserve(kSirDays);
  std::int64_t s = kSirPopulation - kSirInitialInfected;
  std::int64_t i = kSirInitialInfected;
  std::int64_t r = 0;
  const double p_recover = 1.0 - std::exp(-gamma);
  for (int day = 0; day < kSirDays; ++day) {
    const double p_infect =
        1.0 - std::exp(-beta * static_cast<double>(i) / static_cast<double>(kSirPopulation));
    const auto new_infections =
        static_cast<std::int64_t>(binomial_draw(rng, static_cast<std::uint64_t>(s), p_infect));
    const auto new_recoveries =
        static_cast<std::int64_t>(binomial_draw(rng, static_cast<std::uint64_t>(i), p_recover));
    s -= new_infections;
    i += new_infections - new_recoveries;
    r += new_recoveries;
    traj.susceptible.push_back(s);
    traj.infected.push_back(i);
    traj.recovered.push_back(r);
  }
  return traj;
}

std::vector<double> sir_daily_series(const SirTrajectory& t) {
  std::vector<double> daily(t.infected.size());
  for (std::size_t d = 0; d < t.infected.size(); ++d)
    daily[d] = static_cast<double>(t.infected[d]);
  return daily;
}

void sir_apply_weekend_delay(std::span<double> daily) {
  // Day 0 is a Monday; 5% of each Saturday/Sunday count is reported on the
  // following Monday instead. Mass delayed past the horizon is dropped.
  for (std::size_t day = 0; day < daily.size(); ++day) {
    const std::size_t dow = day % 7;
    if (dow != 5 && dow != 6) continue;
    const double moved = std::floor(0.05 * daily[day]);
    daily[day] -= moved;
    const std::size_t monday = day + (7 - dow);
    if (monday < daily.size()) daily[monday] += moved;
  }
}

std::vector<double> sir_summaries(std::span<const double> daily) {
  if (daily.empty()) throw std::invalid_argument("sir_summaries: empty series");
  const std::size_t n = daily.size();
  double total = 0.0, max_v = daily[0];
  std::size_t argmax = 0;
  for (std::size_t d = 0; d < n; ++d) {
    total += daily[d];
    if (daily[d] > max_v) {
      max_v = daily[d];
      argmax = d;
    }
  }
  const double mean_v = total / static_cast<double>(n);

  std::vector<double> sorted(daily.begin(), daily.end());
  std::sort(sorted.begin(), sorted.end());
  const double median_v = (n % 2 == 1)
                              ? sorted[n / 2]
                              : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);

  std::size_t half_day = 0;
  double cum = 0.0;
  for (std::size_t d = 0; d < n; ++d) {
    cum += daily[d];
    if (cum >= 0.5 * total) {
      half_day = d;
      break;
    }
  }

  double num = 0.0, den = 0.0;
  for (std::size_t d = 0; d < n; ++d) {
    const double c = daily[d] - mean_v;
    den += c * c;
    if (d + 1 < n) num += c * (daily[d + 1] - mean_v);
  }
  const double autocorr = den > 0.0 ? num / den : 0.0;

  return {mean_v,  median_v, max_v, static_cast<double>(argmax),
          static_cast<double>(half_day), autocorr};
}

std::vector<double> sir_simulate(std::span<const double> theta, std::uint64_t seed,
                                 bool misspecified) {
  check_theta_dim(task_spec(Task::sir), theta);
  const auto traj = sir_trajectory(theta[0], theta[1], seed);
  auto daily = sir_daily_series(traj);
  if (misspecified) sir_apply_weekend_delay(daily);
  return sir_summaries(daily);
}

// ---------------------------------------------------------------------------
// CS

CsPointPattern cs_point_pattern(std::span<const double> theta, std::uint64_t seed,
                                bool misspecified) {
  check_theta_dim(task_spec(Task::cs), theta);
  const double lambda_cancer = theta[0], lambda_stromal = theta[1], lambda_daughter = theta[2];
  if (!(lambda_cancer > 0.0) || !(lambda_stromal > 0.0) || lambda_daughter < 0.0)
    throw std::invalid_argument("cs: rate parameters must be positive (daughter rate >= 0)");

  CsPointPattern pattern;
  std::vector<double> parents;
  {
    auto rng = make_rng(seed, kCancerParents);
    const auto n = poisson_draw(rng, lambda_cancer);
    parents.reserve(2 * n);
    for (std::uint64_t i = 0; i < n; ++i) {
      parents.push_back(uniform_real(rng, 0.0, 1.0));
      parents.push_back(uniform_real(rng, 0.0, 1.0));
    }
  }
  {
    auto rng = make_rng(seed, kStromal);
    const auto n = poisson_draw(rng, lambda_stromal);
    pattern.stromal_xy.reserve(2 * n);
    for (std::uint64_t i = 0; i < n; ++i) {
      pattern.stromal_xy.push_back(uniform_real(rng, 0.0, 1.0));
      pattern.stromal_xy.push_back(uniform_real(rng, 0.0, 1.0));
    }
  }
  pattern.cancer_xy = parents;
  {
    auto rng = make_rng(seed, kDaughters);
    for (std::size_t p = 0; p + 1 < parents.size(); p += 2) {
      const auto n = poisson_draw(rng, lambda_daughter);
      for (std::uint64_t i = 0; i < n; ++i) {
        const double dx = kCsDaughterSigma * standard_normal(rng);
        const double dy = kCsDaughterSigma * standard_normal(rng);
        if (misspecified && std::sqrt(dx * dx + dy * dy) < kCsRemovalRadius) continue;
        pattern.cancer_xy.push_back(parents[p] + dx);
        pattern.cancer_xy.push_back(parents[p + 1] + dy);
      }
    }
  }
  return pattern;
}

std::vector<double> cs_summaries(std::span<const double> cancer_xy,
                                 std::span<const double> stromal_xy) {
  const std::size_t n_cancer = cancer_xy.size() / 2;
  const std::size_t n_stromal = stromal_xy.size() / 2;
  double mean_d = 0.0, max_d = 0.0;
  if (n_stromal > 0) {
    if (n_cancer == 0) {
      // Degenerate draw: no cancer cells; distances pinned to the square's
      // diameter instead of rejecting the sample.
      mean_d = max_d = std::numbers::sqrt2;
    } else {
      double total = 0.0;
      for (std::size_t s = 0; s < n_stromal; ++s) {
        const double sx = stromal_xy[2 * s], sy = stromal_xy[2 * s + 1];
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < n_cancer; ++c) {
          const double dx = sx - cancer_xy[2 * c], dy = sy - cancer_xy[2 * c + 1];
          best = std::min(best, dx * dx + dy * dy);
        }
        const double d = std::sqrt(best);
        total += d;
        max_d = std::max(max_d, d);
      }
      mean_d = total / static_cast<double>(n_stromal);
    }
  }
  return {static_cast<double>(n_cancer), static_cast<double>(n_stromal), mean_d, max_d};
}

std::vector<double> cs_simulate(std::span<const double> theta, std::uint64_t seed,
                                bool misspecified) {
  const auto pattern = cs_point_pattern(theta, seed, misspecified);
  return cs_summaries(pattern.cancer_xy, pattern.stromal_xy);
}

}  // namespace rope
