#pragma once

// Dense reference solver for small semi-balanced entropic OT instances,
// independent of the production Sinkhorn path: the transport polytope is
// parameterized by its free entries (rows fixed; both marginals fixed when
// tau == 1) and the strictly convex objective is minimized by damped Newton
// steps with an interior line search, starting from the uniform coupling.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "rope/sinkhorn.hpp"

namespace rope::testing {

inline double oracle_objective(const std::vector<double>& p, const CostMatrix& cost,
                               double gamma, double tau) {
  const std::int64_t n_o = cost.rows, n_s = cost.cols;
  double value = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    value += p[k] * cost.values[k];
    if (p[k] > 0.0) value += gamma * p[k] * std::log(p[k]);
  }
  if (tau < 1.0) {
    const double rho = tau * gamma / (1.0 - tau);
    const double b = 1.0 / static_cast<double>(n_s);
    for (std::int64_t j = 0; j < n_s; ++j) {
      double cj = 0.0;
      for (std::int64_t i = 0; i < n_o; ++i) cj += p[static_cast<std::size_t>(i * n_s + j)];
      if (cj > 0.0) value += rho * cj * std::log(cj / b);
    }
  }
  return value;
}

inline std::vector<double> oracle_solve(const CostMatrix& cost, double gamma, double tau) {
  const std::int64_t n_o = cost.rows, n_s = cost.cols;
  const bool balanced = tau == 1.0;
  const double rho = balanced ? 0.0 : tau * gamma / (1.0 - tau);
  const double b = 1.0 / static_cast<double>(n_s);

  // One basis direction per free entry; each keeps every fixed marginal
  // unchanged.
  struct Entry {
    std::int64_t i, j;
    double coef;
  };
  std::vector<std::vector<Entry>> basis;
  const std::int64_t i_max = balanced ? n_o - 1 : n_o;
  for (std::int64_t i = 0; i < i_max; ++i)
    for (std::int64_t j = 0; j + 1 < n_s; ++j) {
      std::vector<Entry> dir{{i, j, 1.0}, {i, n_s - 1, -1.0}};
      if (balanced) {
        dir.push_back({n_o - 1, j, -1.0});
        dir.push_back({n_o - 1, n_s - 1, 1.0});
      }
      basis.push_back(std::move(dir));
    }
  const auto m = static_cast<std::int64_t>(basis.size());

  std::vector<double> p(static_cast<std::size_t>(n_o * n_s),
                        1.0 / static_cast<double>(n_o * n_s));
  auto at = [&n_s](std::vector<double>& v, std::int64_t i, std::int64_t j) -> double& {
    return v[static_cast<std::size_t>(i * n_s + j)];
  };

  std::vector<double> col(static_cast<std::size_t>(n_s));
  auto col_sums = [&](const std::vector<double>& v) {
    for (std::int64_t j = 0; j < n_s; ++j) {
      double s = 0.0;
      for (std::int64_t i = 0; i < n_o; ++i) s += v[static_cast<std::size_t>(i * n_s + j)];
      col[static_cast<std::size_t>(j)] = s;
    }
  };

  double f = oracle_objective(p, cost, gamma, tau);
  for (int iter = 0; iter < 200; ++iter) {
    col_sums(p);
    Eigen::VectorXd grad(m);
    Eigen::MatrixXd hess = Eigen::MatrixXd::Zero(m, m);
    for (std::int64_t a = 0; a < m; ++a) {
      double g = 0.0;
      for (const auto& e : basis[static_cast<std::size_t>(a)]) {
        const double pij = at(p, e.i, e.j);
        g += e.coef * (cost.at(e.i, e.j) + gamma * (1.0 + std::log(pij)));
        if (!balanced && e.coef != 0.0) {
          // column-sum sensitivity of this entry
          g += e.coef * rho * (std::log(col[static_cast<std::size_t>(e.j)] / b) + 1.0);
        }
      }
      grad(a) = g;
      for (std::int64_t c = a; c < m; ++c) {
        double h = 0.0;
        for (const auto& ea : basis[static_cast<std::size_t>(a)])
          for (const auto& ec : basis[static_cast<std::size_t>(c)]) {
            if (ea.i == ec.i && ea.j == ec.j)
              h += ea.coef * ec.coef * gamma / at(p, ea.i, ea.j);
            if (!balanced && ea.j == ec.j)
              h += ea.coef * ec.coef * rho / col[static_cast<std::size_t>(ea.j)];
          }
        hess(a, c) = h;
        hess(c, a) = h;
      }
    }
    if (grad.lpNorm<Eigen::Infinity>() < 1e-13) break;
    const Eigen::VectorXd step = hess.ldlt().solve(-grad);

    // Backtrack into the interior and until the objective decreases.
    double t = 1.0;
    std::vector<double> candidate;
    double f_new = f;
    for (int halving = 0; halving < 200; ++halving) {
      candidate = p;
      for (std::int64_t a = 0; a < m; ++a)
        for (const auto& e : basis[static_cast<std::size_t>(a)])
          at(candidate, e.i, e.j) += t * step(a) * e.coef;
      bool interior = true;
      for (double v : candidate) interior = interior && v > 0.0;
      if (interior) {
        f_new = oracle_objective(candidate, cost, gamma, tau);
        if (f_new <= f) break;
      }
      t *= 0.5;
    }
    if (f_new > f) break;  // no descent direction left at working precision
    p = candidate;
    if (f - f_new < 1e-15 && grad.lpNorm<Eigen::Infinity>() < 1e-9) {
      f = f_new;
      break;
    }
    f = f_new;
  }
  return p;
}

}  // namespace rope::testing
