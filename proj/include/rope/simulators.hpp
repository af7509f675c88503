#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace rope {

enum class Task { cs, sir, pendulum };
enum class Provenance { simulated, real };

struct TaskSpec {
  Task id;
  const char* name;
  int theta_dim;
  int obs_dim;
  int summary_dim;  // NSE output width
  std::vector<double> theta_lo;
  std::vector<double> theta_hi;
};

const TaskSpec& task_spec(Task task);
Task task_from_name(const std::string& name);

struct ThetaVector {
  Task task;
  std::vector<double> values;
};

struct Observation {
  Task task;
  Provenance provenance;
  std::vector<double> values;
};

// Uniform box prior over the task's parameter space.
ThetaVector prior_sample(Task task, std::uint64_t seed);
void prior_sample_into(Task task, std::mt19937_64& rng, std::span<double> out);
double prior_log_density(Task task, std::span<const double> theta);
double prior_log_density_box(std::span<const double> theta, std::span<const double> lo,
                             std::span<const double> hi);

// Deterministic in (theta, seed); `misspecified` switches on the task's
// synthetic real-world discrepancy without perturbing the shared draws.
Observation simulate(Task task, std::span<const double> theta, std::uint64_t seed,
                     bool misspecified);

// --- Pendulum: horizontal position A cos(w0 t + phase) on a 200-point grid
// over [0, 10] s; misspecification multiplies by a friction envelope
// exp(-damping * t) before sensor noise is added. The default sensor noise
// keeps the posterior informative without collapsing it to a point on this
// grid (200 samples over-determine the frequency otherwise).
inline constexpr double kPendulumNoiseSigma = 10.0;
struct PendulumOptions {
  std::optional<double> phase;    // default U(-pi, pi)
  std::optional<double> damping;  // default U[0, 1] when misspecified
  double noise_sigma = kPendulumNoiseSigma;
};
std::vector<double> pendulum_simulate(std::span<const double> theta, std::uint64_t seed,
                                      bool misspecified, const PendulumOptions& opts = {});
std::span<const double> pendulum_time_grid();

// --- SIR: chain-binomial epidemic, N = 100000, I0 = 10, 365 days. The
// recorded series is the daily number of infected individuals; the
// misspecification delays 5% of each weekend count to the following Monday.
struct SirTrajectory {
  std::vector<std::int64_t> susceptible, infected, recovered;  // after each day
};
SirTrajectory sir_trajectory(double beta, double gamma, std::uint64_t seed);
std::vector<double> sir_daily_series(const SirTrajectory& t);
void sir_apply_weekend_delay(std::span<double> daily);
std::vector<double> sir_summaries(std::span<const double> daily);
std::vector<double> sir_simulate(std::span<const double> theta, std::uint64_t seed,
                                 bool misspecified);

// --- CS: spatial point process of cancer parents, daughter cells and stromal
// cells on the unit square; misspecification removes daughters closer than
// 0.01 to their generating parent.
struct CsPointPattern {
  std::vector<double> cancer_xy;   // interleaved x, y
  std::vector<double> stromal_xy;
};
CsPointPattern cs_point_pattern(std::span<const double> theta, std::uint64_t seed,
                                bool misspecified);
std::vector<double> cs_summaries(std::span<const double> cancer_xy,
                                 std::span<const double> stromal_xy);
std::vector<double> cs_simulate(std::span<const double> theta, std::uint64_t seed,
                                bool misspecified);

}  // namespace rope
