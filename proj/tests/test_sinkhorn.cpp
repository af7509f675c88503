#include <cmath>
#include <filesystem>
#include <limits>

#include "doctest.h"
#include "ot_oracle.hpp"
#include "rope/rng.hpp"
#include "rope/sinkhorn.hpp"

using namespace rope;

namespace {

CostMatrix random_cost(std::int64_t n, std::mt19937_64& rng, double scale = 2.0) {
  CostMatrix c;
  c.rows = c.cols = n;
  c.values.resize(static_cast<std::size_t>(n * n));
  for (auto& v : c.values) v = uniform_real(rng, 0.0, scale);
  return c;
}

}  // namespace

TEST_CASE("zero cost gives the uniform coupling") {
  CostMatrix c;
  c.rows = c.cols = 2;
  c.values.assign(4, 0.0);
  const auto p = sinkhorn_semibalanced(c, 0.7, 1.0);
  CHECK(p.converged);
  for (double v : p.p) CHECK(v == doctest::Approx(0.25).epsilon(1e-9));
}

TEST_CASE("large gamma pushes the coupling to uniform") {
  auto rng = make_rng(4, 0);
  const auto c = random_cost(5, rng, 3.0);
  double max_cost = 0.0;
  for (double v : c.values) max_cost = std::max(max_cost, v);
  const auto p = sinkhorn_semibalanced(c, 1000.0 * max_cost, 1.0);
  for (double v : p.p) CHECK(std::fabs(v - 1.0 / 25.0) < 1e-3);
}

TEST_CASE("marginal constraints") {
  auto rng = make_rng(5, 0);
  for (double tau : {0.5, 0.9, 1.0}) {
    const auto c = random_cost(7, rng);
    const auto p = sinkhorn_semibalanced(c, 0.3, tau);
    CHECK(p.converged);
    for (double rs : p.row_sums()) CHECK(std::fabs(rs - 1.0 / 7.0) < 1e-6);
    if (tau == 1.0)
      for (double cs : p.col_sums()) CHECK(std::fabs(cs - 1.0 / 7.0) < 1e-6);
    for (double v : p.p) CHECK(v >= 0.0);
  }
}

TEST_CASE("rho from tau") {
  CHECK(rho_from_tau(0.9, 0.5) == doctest::Approx(4.5).epsilon(1e-12));
  CHECK(rho_from_tau(0.5, 1.0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::isinf(rho_from_tau(1.0, 0.5)));  // balanced signal
  CHECK_THROWS_AS(rho_from_tau(0.0, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(rho_from_tau(1.1, 0.5), std::invalid_argument);
}

TEST_CASE("objective value closed forms") {
  CostMatrix c;
  c.rows = 2;
  c.cols = 3;
  c.values.assign(6, 0.0);
  Coupling uniform;
  uniform.rows = 2;
  uniform.cols = 3;
  uniform.p.assign(6, 1.0 / 6.0);
  SUBCASE("uniform coupling with zero cost is pure entropy") {
    const double got = objective_value(uniform, c, 0.8, 1.0);
    CHECK(got == doctest::Approx(-0.8 * std::log(6.0)).epsilon(1e-12));
  }
  SUBCASE("balanced coupling has zero KL at infinite rho") {
    const double inf = std::numeric_limits<double>::infinity();
    CHECK(std::isfinite(objective_value(uniform, c, 0.8, inf)));
  }
  SUBCASE("negative entries are rejected") {
    Coupling bad = uniform;
    bad.p[0] = -0.1;
    CHECK_THROWS_AS(objective_value(bad, c, 0.8, 1.0), std::invalid_argument);
  }
  SUBCASE("0 log 0 is 0") {
    Coupling sparse = uniform;
    sparse.p = {0.5, 0.0, 0.0, 0.0, 0.0, 0.5};
    CHECK(std::isfinite(objective_value(sparse, c, 0.8, 1.0)));
  }
}

TEST_CASE("solver beats the uniform feasible point") {
  auto rng = make_rng(6, 0);
  for (int rep = 0; rep < 5; ++rep) {
    const auto c = random_cost(4, rng);
    for (double tau : {0.5, 1.0}) {
      const double gamma = 0.4;
      const double rho = tau < 1.0 ? rho_from_tau(tau, gamma)
                                   : std::numeric_limits<double>::infinity();
      const auto p = sinkhorn_semibalanced(c, gamma, tau);
      Coupling uniform;
      uniform.rows = uniform.cols = 4;
      uniform.p.assign(16, 1.0 / 16.0);
      CHECK(objective_value(p, c, gamma, rho) <=
            objective_value(uniform, c, gamma, rho) + 1e-9);
    }
  }
}

TEST_CASE("small-instance oracle agreement") {
  auto rng = make_rng(7, 0);
  int checked = 0;
  for (int rep = 0; rep < 4; ++rep) {
    for (std::int64_t n : {2, 3}) {
      const auto c = random_cost(n, rng);
      for (double gamma : {0.1, 0.5}) {
        for (double tau : {0.5, 1.0}) {
          const auto p = sinkhorn_semibalanced(c, gamma, tau);
          REQUIRE(p.converged);
          const auto ref = rope::testing::oracle_solve(c, gamma, tau);
          const double got = rope::testing::oracle_objective(p.p, c, gamma, tau);
          const double want = rope::testing::oracle_objective(ref, c, gamma, tau);
          INFO("n=", n, " gamma=", gamma, " tau=", tau);
          CHECK(std::fabs(got - want) < 1e-6);
          ++checked;
        }
      }
    }
  }
  CHECK(checked == 32);
}

TEST_CASE("entropy is non-decreasing in gamma") {
  auto rng = make_rng(8, 0);
  const auto c = random_cost(6, rng, 4.0);
  double prev = -1e300;
  for (double gamma : {0.1, 0.5, 1.0, 5.0}) {
    const auto p = sinkhorn_semibalanced(c, gamma, 1.0);
    const double h = coupling_entropy(p.p);
    CHECK(h >= prev - 1e-10);
    prev = h;
  }
}

TEST_CASE("lower tau down-weights far simulations") {
  // Column 0 is cheap for every observation, the rest are far.
  CostMatrix c;
  c.rows = 4;
  c.cols = 4;
  c.values.assign(16, 10.0);
  for (std::int64_t i = 0; i < 4; ++i) c.values[static_cast<std::size_t>(i * 4)] = 0.0;
  double prev_far_mass = std::numeric_limits<double>::infinity();
  for (double tau : {1.0, 0.9, 0.7, 0.5}) {
    const auto p = sinkhorn_semibalanced(c, 0.5, tau);
    const auto cols = p.col_sums();
    const double far = cols[1] + cols[2] + cols[3];
    CHECK(far < prev_far_mass);
    prev_far_mass = far;
  }
}

TEST_CASE("invalid inputs") {
  CostMatrix c;
  c.rows = c.cols = 2;
  c.values = {0.0, 1.0, std::numeric_limits<double>::quiet_NaN(), 0.0};
  CHECK_THROWS_AS(sinkhorn_semibalanced(c, 0.5, 1.0), std::invalid_argument);
  c.values = {0.0, 1.0, 1.0, 0.0};
  CHECK_THROWS_AS(sinkhorn_semibalanced(c, -1.0, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(sinkhorn_semibalanced(c, 0.5, 1.5), std::invalid_argument);
}

TEST_CASE("non-convergence is reported, not thrown") {
  auto rng = make_rng(9, 0);
  const auto c = random_cost(5, rng);
  SinkhornOptions opts;
  opts.max_iters = 1;
  opts.tol = 1e-16;
  const auto p = sinkhorn_semibalanced(c, 0.05, 1.0, opts);
  CHECK_FALSE(p.converged);
  // the final projection still enforces the hard marginal exactly
  for (double rs : p.row_sums()) CHECK(std::fabs(rs - 0.2) < 1e-12);
}

TEST_CASE("coupling dump round-trips") {
  auto rng = make_rng(10, 0);
  const auto c = random_cost(3, rng);
  const auto p = sinkhorn_semibalanced(c, 0.7, 0.9);
  const auto path = std::filesystem::temp_directory_path() / "rope_test_coupling.txt";
  save_coupling(p, path);
  const auto back = load_coupling(path);
  CHECK(back.rows == p.rows);
  CHECK(back.cols == p.cols);
  CHECK(back.gamma == p.gamma);
  CHECK(back.tau == p.tau);
  CHECK(back.iterations == p.iterations);
  CHECK(back.converged == p.converged);
  CHECK(back.p == p.p);
  std::filesystem::remove(path);
}
