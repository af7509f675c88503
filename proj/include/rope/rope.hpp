#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "rope/metrics.hpp"
#include "rope/npe.hpp"
#include "rope/sinkhorn.hpp"

namespace rope {

struct FineTuneConfig {
  double learning_rate = 1e-5;
  std::int64_t steps = 2000;
  int mc_samples = 1;  // simulator draws per expectation target
  std::uint64_t seed = 0;
};

struct FineTuneResult {
  NseParams tuned;
  double initial_val_loss = 0.0;
  double best_val_loss = 0.0;
  std::int64_t best_step = 0;  // 0 = the initialization itself
};

// Fits the real-side statistic g by descending the summed L2 distance between
// g(x_o) and Monte-Carlo targets E[h(S(theta, .))], starting from h's
// weights; returns the checkpoint with the lowest held-out validation loss
// (the initialization counts as a candidate). With an empty validation set
// the training loss selects the checkpoint.
FineTuneResult finetune_nse(const FlowModel& base, const Dataset& calibration,
                            const Dataset& calibration_val, const FineTuneConfig& cfg);

// C[i][j] = | g(x_o^i) - h(x_s^j) |_2 between summary vectors.
CostMatrix build_cost(const NseParams& real_side, const NseParams& sim_side,
                      const Dataset& real_obs, const Dataset& sims);

// Per-observation mixture over simulation-conditioned flow posteriors with
// weights alpha = n_o * P. Sampling reuses cached per-component banks; banks
// are built lazily under a lock and immutable afterwards.
class MixturePosterior final : public PosteriorEstimate {
 public:
  MixturePosterior(std::vector<double> weights, std::int64_t n_obs, std::int64_t n_components,
                   std::shared_ptr<const FlowModel> flow, std::vector<double> component_summaries,
                   std::int64_t bank_size, std::uint64_t bank_seed);

  int theta_dim() const override { return flow_->theta_dim; }
  std::int64_t n_observations() const override { return n_obs_; }
  double log_prob(std::int64_t obs_index, std::span<const double> theta) const override;
  void sample(std::int64_t obs_index, std::int64_t n, std::uint64_t seed,
              double* out) const override;

  std::span<const double> weight_row(std::int64_t i) const {
    return {weights_.data() + i * n_components_, static_cast<std::size_t>(n_components_)};
  }
  std::int64_t n_components() const { return n_components_; }
  const FlowModel& flow() const { return *flow_; }
  std::span<const double> component_summary(std::int64_t j) const {
    return {component_summaries_.data() + j * flow_->summary_dim,
            static_cast<std::size_t>(flow_->summary_dim)};
  }

  // Pooled draw over observations picked uniformly at random; groups draws by
  // component and samples the flow directly (the self-calibration
  // diagnostic's path, independent of the banks).
  std::vector<double> pooled_sample(std::int64_t n, std::uint64_t seed) const;

  // The cached bank of component j (built on first use).
  std::span<const double> component_bank(std::int64_t j) const { return bank(j); }

 private:
  std::span<const double> bank(std::int64_t j) const;

  std::vector<double> weights_;  // n_obs x n_components, rows sum to 1
  std::int64_t n_obs_, n_components_;
  std::shared_ptr<const FlowModel> flow_;
  std::vector<double> component_summaries_;  // n_components x l
  std::int64_t bank_size_;
  std::uint64_t bank_seed_;
  mutable std::vector<std::vector<double>> banks_;
  mutable std::mutex bank_mutex_;
};

// alpha = n_o * P; rows must sum to 1 within 1e-6.
std::shared_ptr<MixturePosterior> assemble_posterior(const Coupling& coupling,
                                                     std::shared_ptr<const FlowModel> flow,
                                                     const Dataset& sims,
                                                     std::int64_t bank_size = 10000,
                                                     std::uint64_t bank_seed = 0);

enum class RopeVariant { full, ot_only, tuning_only };

struct RopeConfig {
  double gamma = 0.5;
  double tau = 1.0;
  RopeVariant variant = RopeVariant::full;
  FineTuneConfig finetune;
  SinkhornOptions sinkhorn;
  std::int64_t bank_size = 10000;
  std::int64_t n_sims = 0;  // 0 => one simulation per test observation
};

struct RopeResult {
  std::shared_ptr<PosteriorEstimate> posterior;
  std::shared_ptr<MixturePosterior> mixture;  // null for tuning-only
  NseParams tuned;                            // == base NSE for OT-only
  Coupling coupling;                          // diagnostics (empty for tuning-only)
  std::string provenance_json;
};

// The full pipeline on a trained model: fine-tune the statistic on the
// calibration set, simulate a fresh prior batch, couple real and simulated
// summaries with semi-balanced entropic OT, and assemble the mixture.
RopeResult run_rope(std::shared_ptr<const FlowModel> model, const Dataset& calibration,
                    const Dataset& calibration_val, const Dataset& test, std::uint64_t seed,
                    const RopeConfig& cfg);

// Baselines -----------------------------------------------------------------

std::shared_ptr<PosteriorEstimate> baseline_prior(Task task, const Dataset& test);

// Simulated-data flow applied directly to the real observations.
std::shared_ptr<PosteriorEstimate> baseline_npe_direct(std::shared_ptr<const FlowModel> model,
                                                       const Dataset& test);

// Flow retrained on 50/50 simulated/calibration batches, best checkpoint by
// validation log density on the held-out calibration split.
std::shared_ptr<PosteriorEstimate> baseline_jnpe(Task task, const Dataset& calibration,
                                                 const Dataset& calibration_val,
                                                 const Dataset& test, const TrainConfig& cfg);

struct MlpBaselineConfig {
  double learning_rate = 3e-4;
  std::int64_t steps = 3000;
  std::uint64_t seed = 0;
};

// Gaussian mean/log-variance head trained on the calibration set by maximum
// likelihood, best checkpoint by validation log density.
std::shared_ptr<PosteriorEstimate> baseline_mlp(Task task, const Dataset& calibration,
                                                const Dataset& calibration_val,
                                                const Dataset& test,
                                                const MlpBaselineConfig& cfg);

// Applies the simulated-data pipeline to synthetic observations regenerated
// from the test labels: the no-misspecification reference.
std::shared_ptr<PosteriorEstimate> sbi_reference(std::shared_ptr<const FlowModel> model,
                                                 const Dataset& test, std::uint64_t seed);

}  // namespace rope
