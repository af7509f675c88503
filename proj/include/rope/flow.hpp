#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "rope/simulators.hpp"
#include "rope/tensor.hpp"

namespace rope {

// Conditional density model for p(theta | x): an MLP statistic estimator
// compresses the observation to an l-dimensional summary, a stack of masked
// affine autoregressive layers (order reversed between layers) maps theta to
// a standard-normal base. Bounded parameters are squashed to R^k by an
// affine+logit map before the flow; its log-determinant is part of log_prob.

struct DenseLayer {
  ad::Tensor weight;  // [in, out]
  ad::Tensor bias;    // [out]
};

struct Mlp {
  std::vector<DenseLayer> layers;  // ReLU between layers, linear output
  int in_dim() const;
  int out_dim() const;
};

Mlp make_mlp(std::span<const int> dims, std::mt19937_64& rng, bool zero_output_layer = false);
ad::Tensor mlp_apply(const Mlp& mlp, const ad::Tensor& x);
// Plain forward pass used on sampling/evaluation hot paths.
std::vector<double> mlp_apply_raw(const Mlp& mlp, std::span<const double> x, std::int64_t n);

// Statistic estimator: fixed input whitening followed by the MLP.
struct NseParams {
  Mlp net;
  std::vector<double> input_shift;
  std::vector<double> input_scale;
  int input_dim() const { return net.in_dim(); }
  int summary_dim() const { return net.out_dim(); }
};

ad::Tensor nse_apply(const NseParams& nse, const ad::Tensor& x);
std::vector<double> nse_apply_raw(const NseParams& nse, std::span<const double> x, std::int64_t n);

struct FlowModel {
  Task task = Task::pendulum;
  int theta_dim = 0;
  int summary_dim = 0;
  int n_layers = 0;
  NseParams nse;
  std::vector<std::vector<Mlp>> conditioners;  // [layer][dim], outputs (shift, raw log-scale)
  std::vector<double> theta_lo, theta_hi;      // empty => unbounded (test configurations)

  std::vector<ad::Tensor> parameters() const;
  void zero_grad() const;
  std::vector<std::vector<double>> snapshot_values() const;
  void restore_values(const std::vector<std::vector<double>>& snap) const;
};

struct FlowArch {
  std::vector<int> nse_hidden;          // empty => per-task default
  std::vector<int> conditioner_hidden{64, 64};
  // Optional per-parameter-dimension override of conditioner_hidden; sizing
  // the conditioner of one dimension down caps how sharply the flow can
  // resolve that dimension.
  std::vector<std::vector<int>> conditioner_hidden_per_dim;
  int n_layers = 5;
};

// Fresh model for a task; whitening statistics are estimated from
// `n_whiten` prior simulations (0 skips whitening).
FlowModel make_flow_model(Task task, std::uint64_t seed, const FlowArch& arch = {},
                          std::int64_t n_whiten = 4096);

// Rescales the statistic estimator so its summary dimensions have zero mean
// and unit variance over the given observations, folding the inverse into
// the conditioner input weights. A pure reparameterization: every density
// and sample is unchanged, but summary-space distances become scale-free.
void standardize_summaries(FlowModel& m, std::span<const double> obs, std::int64_t n);

// Bare flow without an NSE for direct-summary tests.
FlowModel make_bare_flow(int theta_dim, int summary_dim, std::uint64_t seed,
                         const FlowArch& arch = {}, std::vector<double> lo = {},
                         std::vector<double> hi = {});

// Log density of matched rows (theta[i] against summary[i]); participates in
// the active tape. All rows must lie strictly inside the bounds.
ad::Tensor flow_log_prob_tensor(const FlowModel& m, const ad::Tensor& theta,
                                const ad::Tensor& summary);

// Evaluation path: out-of-support rows yield -inf, nothing is recorded.
std::vector<double> flow_log_prob(const FlowModel& m, std::span<const double> theta,
                                  std::span<const double> summary, std::int64_t n);

// n draws conditioned on one summary; samples always land inside the bounds.
std::vector<double> flow_sample(const FlowModel& m, std::span<const double> summary,
                                std::int64_t n, std::uint64_t seed);

// Maps theta rows to base space and back (round-trip diagnostics).
std::vector<double> flow_forward(const FlowModel& m, std::span<const double> theta,
                                 std::span<const double> summary, std::int64_t n);
std::vector<double> flow_inverse(const FlowModel& m, std::span<const double> base,
                                 std::span<const double> summary, std::int64_t n);

// Versioned checkpoint: architecture descriptor + flat parameter table;
// round-trips bit-exactly.
void save_checkpoint(const FlowModel& m, const std::filesystem::path& path);
FlowModel load_checkpoint(const std::filesystem::path& path);

// Statistic-estimator-only checkpoint (fine-tuned summaries).
void save_nse(const NseParams& nse, const std::filesystem::path& path);
NseParams load_nse(const std::filesystem::path& path);

}  // namespace rope
