#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace rope {

struct CostMatrix {
  std::int64_t rows = 0;  // observations
  std::int64_t cols = 0;  // simulations
  std::vector<double> values;  // row-major, finite and >= 0
  std::string description;

  double at(std::int64_t i, std::int64_t j) const {
    return values[static_cast<std::size_t>(i * cols + j)];
  }
};

// Discrete coupling between n_o observations (hard marginal 1/n_o per row)
// and n_s simulations (KL-relaxed marginal, strength tau = rho / (rho+gamma)).
struct Coupling {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<double> p;  // row-major
  double gamma = 0.0;
  double tau = 1.0;
  std::int64_t iterations = 0;
  bool converged = false;
  double marginal_error = 0.0;  // row violation at the last Sinkhorn sweep

  std::span<const double> row(std::int64_t i) const {
    return {p.data() + i * cols, static_cast<std::size_t>(cols)};
  }
  std::vector<double> row_sums() const;
  std::vector<double> col_sums() const;
};

struct SinkhornOptions {
  double tol = 1e-9;
  std::int64_t max_iters = 10000;
};

// Log-domain scaling iterations for
//   min <P, C> + rho KL(P^T 1 || 1/n_s) + gamma <P, log P>
//   s.t. each row of P sums to 1/n_o,
// with the simulated-side update exponentiated by tau. The returned coupling
// has its rows renormalized exactly; on iteration exhaustion it is returned
// with converged = false.
Coupling sinkhorn_semibalanced(const CostMatrix& cost, double gamma, double tau,
                               const SinkhornOptions& opts = {});

// Inverts tau = rho / (rho + gamma); tau == 1 returns +infinity (balanced).
double rho_from_tau(double tau, double gamma);

// Exact objective value with 0 log 0 := 0; at rho = +infinity the KL term is
// 0 on (numerically) balanced columns and +infinity otherwise.
double objective_value(std::span<const double> p, const CostMatrix& cost, double gamma,
                       double rho);
double objective_value(const Coupling& c, const CostMatrix& cost, double gamma, double rho);

double coupling_entropy(std::span<const double> p);  // -sum p log p

// Text dump with a diagnostic header; round-trips the matrix at full
// precision.
void save_coupling(const Coupling& c, const std::filesystem::path& path);
Coupling load_coupling(const std::filesystem::path& path);

}  // namespace rope
