#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "rope/dataset.hpp"
#include "rope/flow.hpp"

namespace rope {

struct TrainConfig {
  std::int64_t batch_size = 100;
  double learning_rate = 5e-4;
  std::int64_t max_steps = 3000;
  std::int64_t val_interval = 250;
  std::int64_t val_size = 10000;
  std::uint64_t seed = 0;
  int n_flow_layers = 5;

  void validate() const;
};

struct TrainReport {
  double best_val_log_prob = 0.0;
  std::int64_t best_step = -1;
  std::vector<double> batch_loss;                         // per step
  std::vector<std::pair<std::int64_t, double>> val_log_prob;  // (step, mean)
};

// Maximizes the expected conditional log density on fresh simulator batches
// (theta ~ prior, x = S(theta, .)) and returns the checkpoint with the best
// mean log density on a fixed held-out simulated validation set.
FlowModel train_npe(Task task, const TrainConfig& cfg, TrainReport* report = nullptr);

// Same loop on a caller-supplied model; `mix_real` interleaves rows from a
// labeled real set into every batch (the joint-training baseline).
FlowModel train_flow_loop(FlowModel model, Task task, const TrainConfig& cfg,
                          const Dataset* mix_real, const Dataset* val_real,
                          TrainReport* report);

struct PpcReport {
  double mean_log_prob = 0.0;
  std::vector<double> rank_chi2_pvalues;  // one per parameter dimension
  std::int64_t n = 0;
};

// Simulation-based check on fresh well-specified pairs: mean log density and
// a per-dimension uniformity test of posterior ranks.
PpcReport posterior_predictive_check(const FlowModel& model, std::int64_t n, int samples_per_pair,
                                     std::uint64_t seed);

}  // namespace rope
