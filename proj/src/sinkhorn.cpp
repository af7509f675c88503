#include "rope/sinkhorn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "rope/parallel.hpp"

namespace rope {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double lse(std::span<const double> v) {
  double mx = -kInf;
  for (double x : v) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - mx);
  return mx + std::log(acc);
}

void check_cost(const CostMatrix& cost) {
  if (cost.rows <= 0 || cost.cols <= 0 ||
      cost.values.size() != static_cast<std::size_t>(cost.rows * cost.cols))
    throw std::invalid_argument("sinkhorn: malformed cost matrix");
  for (double v : cost.values)
    if (!std::isfinite(v) || v < 0.0)
      throw std::invalid_argument("sinkhorn: cost entries must be finite and nonnegative");
}

}  // namespace

std::vector<double> Coupling::row_sums() const {
  std::vector<double> s(static_cast<std::size_t>(rows), 0.0);
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) s[static_cast<std::size_t>(i)] += p[static_cast<std::size_t>(i * cols + j)];
  return s;
}

std::vector<double> Coupling::col_sums() const {
  std::vector<double> s(static_cast<std::size_t>(cols), 0.0);
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) s[static_cast<std::size_t>(j)] += p[static_cast<std::size_t>(i * cols + j)];
  return s;
}

double rho_from_tau(double tau, double gamma) {
  if (!(gamma > 0.0)) throw std::invalid_argument("rho_from_tau: gamma must be positive");
  if (!(tau > 0.0) || tau > 1.0) throw std::invalid_argument("rho_from_tau: tau must be in (0, 1]");
  if (tau == 1.0) return kInf;  // balanced mode, no finite rho
  return tau * gamma / (1.0 - tau);
}

Coupling sinkhorn_semibalanced(const CostMatrix& cost, double gamma, double tau,
                               const SinkhornOptions& opts) {
  check_cost(cost);
  if (!(gamma > 0.0)) throw std::invalid_argument("sinkhorn: gamma must be positive");
  if (!(tau > 0.0) || tau > 1.0) throw std::invalid_argument("sinkhorn: tau must be in (0, 1]");

  const std::int64_t n_o = cost.rows, n_s = cost.cols;
  const double log_a = -std::log(static_cast<double>(n_o));
  const double log_b = -std::log(static_cast<double>(n_s));
  const double a = 1.0 / static_cast<double>(n_o);

  // Column-major copy so both sweeps stream contiguously.
  std::vector<double> cost_t(static_cast<std::size_t>(n_o * n_s));
  for (std::int64_t i = 0; i < n_o; ++i)
    for (std::int64_t j = 0; j < n_s; ++j)
      cost_t[static_cast<std::size_t>(j * n_o + i)] = cost.values[static_cast<std::size_t>(i * n_s + j)];

  std::vector<double> u(static_cast<std::size_t>(n_o), 0.0);
  std::vector<double> v(static_cast<std::size_t>(n_s), 0.0);
  std::vector<double> row_err(static_cast<std::size_t>(n_o), 0.0);

  const bool par = n_o * n_s >= (1 << 16);
  auto for_rows = [&](auto&& fn) {
    if (par)
      parallel_for(n_o, fn);
    else
      for (std::int64_t i = 0; i < n_o; ++i) fn(i);
  };
  auto for_cols = [&](auto&& fn) {
    if (par)
      parallel_for(n_s, fn);
    else
      for (std::int64_t j = 0; j < n_s; ++j) fn(j);
  };

  Coupling result;
  result.rows = n_o;
  result.cols = n_s;
  result.gamma = gamma;
  result.tau = tau;

  std::vector<double> scratch_row(static_cast<std::size_t>(n_s));
  double err = kInf;
  std::int64_t it = 0;
  for (; it < opts.max_iters; ++it) {
    // Row scaling makes the hard marginal exact given v.
    for_rows([&](std::int64_t i) {
      std::vector<double> t(static_cast<std::size_t>(n_s));
      const double* ci = cost.values.data() + i * n_s;
      for (std::int64_t j = 0; j < n_s; ++j)
        t[static_cast<std::size_t>(j)] = (v[static_cast<std::size_t>(j)] - ci[j]) / gamma;
      u[static_cast<std::size_t>(i)] = gamma * (log_a - lse(t));
    });
    // Relaxed simulated-side update, exponentiated by tau in log domain.
    for_cols([&](std::int64_t j) {
      std::vector<double> t(static_cast<std::size_t>(n_o));
      const double* cj = cost_t.data() + j * n_o;
      for (std::int64_t i = 0; i < n_o; ++i)
        t[static_cast<std::size_t>(i)] = (u[static_cast<std::size_t>(i)] - cj[i]) / gamma;
      v[static_cast<std::size_t>(j)] = tau * gamma * (log_b - lse(t));
    });
    // Convergence is measured on the hard (observation-side) marginal only.
    for_rows([&](std::int64_t i) {
      const double* ci = cost.values.data() + i * n_s;
      double s = 0.0;
      for (std::int64_t j = 0; j < n_s; ++j)
        s += std::exp((u[static_cast<std::size_t>(i)] + v[static_cast<std::size_t>(j)] - ci[j]) / gamma);
      row_err[static_cast<std::size_t>(i)] = std::fabs(s - a);
    });
    err = *std::max_element(row_err.begin(), row_err.end());
    if (!std::isfinite(err))
      throw std::runtime_error("sinkhorn: diverged (non-finite marginal error)");
    if (err < opts.tol) {
      ++it;
      break;
    }
  }

  result.iterations = it;
  result.converged = err < opts.tol;
  result.marginal_error = err;

  // Materialize and project rows exactly onto the hard constraint.
  result.p.resize(static_cast<std::size_t>(n_o * n_s));
  for_rows([&](std::int64_t i) {
    double* pi = result.p.data() + i * n_s;
    const double* ci = cost.values.data() + i * n_s;
    double s = 0.0;
    for (std::int64_t j = 0; j < n_s; ++j) {
      pi[j] = std::exp((u[static_cast<std::size_t>(i)] + v[static_cast<std::size_t>(j)] - ci[j]) / gamma);
      s += pi[j];
    }
    const double scale = a / s;
    for (std::int64_t j = 0; j < n_s; ++j) pi[j] *= scale;
  });
  return result;
}

double objective_value(std::span<const double> p, const CostMatrix& cost, double gamma,
                       double rho) {
  if (p.size() != cost.values.size())
    throw std::invalid_argument("objective_value: coupling/cost size mismatch");
  double transport = 0.0, neg_entropy = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (p[k] < 0.0) throw std::invalid_argument("objective_value: negative coupling entry");
    transport += p[k] * cost.values[k];
    if (p[k] > 0.0) neg_entropy += p[k] * std::log(p[k]);
  }
  const double b = 1.0 / static_cast<double>(cost.cols);
  double kl = 0.0;
  for (std::int64_t j = 0; j < cost.cols; ++j) {
    double cj = 0.0;
    for (std::int64_t i = 0; i < cost.rows; ++i) cj += p[static_cast<std::size_t>(i * cost.cols + j)];
    if (cj > 0.0) kl += cj * std::log(cj / b);
  }
  double marginal_term;
  if (std::isinf(rho)) {
    marginal_term = kl < 1e-9 ? 0.0 : kInf;
  } else {
    if (!(rho > 0.0)) throw std::invalid_argument("objective_value: rho must be positive");
    marginal_term = rho * kl;
  }
  return transport + marginal_term + gamma * neg_entropy;
}

double objective_value(const Coupling& c, const CostMatrix& cost, double gamma, double rho) {
  return objective_value(c.p, cost, gamma, rho);
}

double coupling_entropy(std::span<const double> p) {
  double h = 0.0;
  for (double x : p)
    if (x > 0.0) h -= x * std::log(x);
  return h;
}

void save_coupling(const Coupling& c, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_coupling: cannot open " + path.string());
  out << "# n_o n_s gamma tau iterations converged\n";
  char head[128];
  std::snprintf(head, sizeof(head), "%lld %lld %.17g %.17g %lld %d\n",
                static_cast<long long>(c.rows), static_cast<long long>(c.cols), c.gamma, c.tau,
                static_cast<long long>(c.iterations), c.converged ? 1 : 0);
  out << head;
  char buf[32];
  for (std::int64_t i = 0; i < c.rows; ++i) {
    for (std::int64_t j = 0; j < c.cols; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", c.p[static_cast<std::size_t>(i * c.cols + j)]);
      out << buf << (j + 1 < c.cols ? ' ' : '\n');
    }
  }
  if (!out) throw std::runtime_error("save_coupling: write failed for " + path.string());
}

Coupling load_coupling(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_coupling: cannot open " + path.string());
  std::string comment;
  std::getline(in, comment);
  Coupling c;
  long long rows, cols, iters;
  int conv;
  if (!(in >> rows >> cols >> c.gamma >> c.tau >> iters >> conv))
    throw std::runtime_error("load_coupling: corrupt header in " + path.string());
  c.rows = rows;
  c.cols = cols;
  c.iterations = iters;
  c.converged = conv != 0;
  c.p.resize(static_cast<std::size_t>(rows * cols));
  for (auto& v : c.p)
    if (!(in >> v)) throw std::runtime_error("load_coupling: truncated matrix in " + path.string());
  return c;
}

}  // namespace rope
