#include "rope/npe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "rope/optim.hpp"
#include "rope/rng.hpp"
#include "rope/stats.hpp"

namespace rope {

namespace {

enum Stream : std::uint64_t {
  kValSet = 31,
  kBatchTheta = 32,
  kBatchSim = 33,
  kMixPick = 34,
  kPpc = 35,
};

// Mean log density of a labeled set under the model, chunked to bound peak
// memory; -inf rows participate (they indicate a broken model here).
double mean_log_prob(const FlowModel& model, const Dataset& ds) {
  const std::int64_t chunk = 4096;
  double total = 0.0;
  for (std::int64_t begin = 0; begin < ds.n; begin += chunk) {
    const std::int64_t m = std::min(chunk, ds.n - begin);
    const auto summaries = nse_apply_raw(
        model.nse, {ds.obs.data() + begin * ds.obs_dim, static_cast<std::size_t>(m * ds.obs_dim)},
        m);
    const auto lp = flow_log_prob(
        model, {ds.theta.data() + begin * ds.theta_dim, static_cast<std::size_t>(m * ds.theta_dim)},
        summaries, m);
    for (double v : lp) total += v;
  }
  return total / static_cast<double>(ds.n);
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 1 || learning_rate <= 0.0 || max_steps < 1 || val_interval < 1 ||
      n_flow_layers < 1)
    throw std::invalid_argument("TrainConfig: all fields must be positive");
  if (val_size < 1000) throw std::invalid_argument("TrainConfig: val_size must be at least 1000");
}

FlowModel train_flow_loop(FlowModel model, Task task, const TrainConfig& cfg,
                          const Dataset* mix_real, const Dataset* val_real,
                          TrainReport* report) {
  cfg.validate();
  const TaskSpec& spec = task_spec(task);
  if (mix_real && mix_real->n == 0)
    throw std::invalid_argument("train_flow_loop: empty calibration set");

  const Dataset val_sim = val_real == nullptr
                              ? generate_dataset(task, cfg.val_size, mix_seed(cfg.seed, kValSet),
                                                 /*misspecified=*/false)
                              : Dataset{};
  const Dataset& val = val_real ? *val_real : val_sim;
  if (val.n == 0) throw std::invalid_argument("train_flow_loop: empty validation set");

  auto params = model.parameters();
  AdamState adam;
  adam.init(params);

  TrainReport local;
  TrainReport& rep = report ? *report : local;
  rep.best_val_log_prob = -std::numeric_limits<double>::infinity();
  rep.best_step = -1;
  std::vector<std::vector<double>> best_snapshot;

  const std::int64_t b = cfg.batch_size;
  std::vector<double> theta_batch(static_cast<std::size_t>(b * spec.theta_dim));
  std::vector<double> obs_batch(static_cast<std::size_t>(b * spec.obs_dim));
  auto theta_rng = make_rng(cfg.seed, kBatchTheta);
  auto mix_rng = make_rng(cfg.seed, kMixPick);

  for (std::int64_t step = 0; step < cfg.max_steps; ++step) {
    // Half the batch comes from the real set when joint training.
    const std::int64_t n_real = mix_real ? b / 2 : 0;
    for (std::int64_t i = 0; i < b; ++i) {
      double* theta_row = theta_batch.data() + i * spec.theta_dim;
      double* obs_row = obs_batch.data() + i * spec.obs_dim;
      if (i < n_real) {
        const auto pick = static_cast<std::int64_t>(uniform_index(mix_rng, static_cast<std::uint64_t>(mix_real->n)));
        std::copy_n(mix_real->theta.begin() + pick * spec.theta_dim, spec.theta_dim, theta_row);
        std::copy_n(mix_real->obs.begin() + pick * spec.obs_dim, spec.obs_dim, obs_row);
      } else {
        prior_sample_into(task, theta_rng, {theta_row, static_cast<std::size_t>(spec.theta_dim)});
        const auto obs = simulate(
            task, {theta_row, static_cast<std::size_t>(spec.theta_dim)},
            mix_seed(mix_seed(cfg.seed, kBatchSim), static_cast<std::uint64_t>(step * b + i)),
            false);
        std::copy(obs.values.begin(), obs.values.end(), obs_row);
      }
    }

    {
      ad::Tape tape;
      auto theta_t = ad::Tensor::from_data({b, spec.theta_dim}, theta_batch);
      auto obs_t = ad::Tensor::from_data({b, spec.obs_dim}, obs_batch);
      auto lp = flow_log_prob_tensor(model, theta_t, nse_apply(model.nse, obs_t));
      auto loss = ad::neg(ad::mean(lp));
      rep.batch_loss.push_back(loss.item());
      ad::backward(loss);
      adam_step(params, adam, cfg.learning_rate);
      model.zero_grad();
    }

    if ((step + 1) % cfg.val_interval == 0 || step + 1 == cfg.max_steps) {
      const double v = mean_log_prob(model, val);
      if (std::isnan(v))
        throw std::runtime_error("train_flow_loop: validation log-prob became NaN at step " +
                                 std::to_string(step + 1) + " (loss " +
                                 std::to_string(rep.batch_loss.back()) + "); training diverged");
      rep.val_log_prob.emplace_back(step + 1, v);
      if (v > rep.best_val_log_prob) {
        rep.best_val_log_prob = v;
        rep.best_step = step + 1;
        best_snapshot = model.snapshot_values();
      }
    }
  }
  if (!best_snapshot.empty()) model.restore_values(best_snapshot);
  // Canonical summary scale: unit variance per dimension over fresh
  // simulations, so downstream summary-space costs are scale-free.
  {
    const Dataset norm_set = generate_dataset(task, 4096, mix_seed(cfg.seed, kValSet + 1),
                                              /*misspecified=*/false);
    standardize_summaries(model, norm_set.obs, norm_set.n);
  }
  return model;
}

FlowModel train_npe(Task task, const TrainConfig& cfg, TrainReport* report) {
  FlowArch arch;
  arch.n_layers = cfg.n_flow_layers;
  FlowModel model = make_flow_model(task, cfg.seed, arch);
  return train_flow_loop(std::move(model), task, cfg, nullptr, nullptr, report);
}

PpcReport posterior_predictive_check(const FlowModel& model, std::int64_t n,
                                     int samples_per_pair, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("posterior_predictive_check: empty report requested");
  if (samples_per_pair < 1)
    throw std::invalid_argument("posterior_predictive_check: need at least one sample per pair");
  const Task task = model.task;
  const TaskSpec& spec = task_spec(task);
  const Dataset ds = generate_dataset(task, n, mix_seed(seed, kPpc), /*misspecified=*/false);

  PpcReport rep;
  rep.n = n;
  rep.mean_log_prob = mean_log_prob(model, ds);

  const int n_bins = 20;
  const int k = spec.theta_dim;
  std::vector<std::vector<std::int64_t>> bins(static_cast<std::size_t>(k),
                                              std::vector<std::int64_t>(n_bins, 0));
  for (std::int64_t i = 0; i < n; ++i) {
    const auto summary = nse_apply_raw(model.nse, ds.obs_row(i), 1);
    const auto samples = flow_sample(model, summary, samples_per_pair,
                                     mix_seed(mix_seed(seed, 36), static_cast<std::uint64_t>(i)));
    const auto truth = ds.theta_row(i);
    for (int j = 0; j < k; ++j) {
      int rank = 0;
      for (int s = 0; s < samples_per_pair; ++s)
        if (samples[static_cast<std::size_t>(s * k + j)] < truth[static_cast<std::size_t>(j)]) ++rank;
      const int bin = std::min(n_bins - 1, rank * n_bins / (samples_per_pair + 1));
      bins[static_cast<std::size_t>(j)][static_cast<std::size_t>(bin)] += 1;
    }
  }
  const double expected = static_cast<double>(n) / n_bins;
  std::vector<double> expected_counts(n_bins, expected);
  for (int j = 0; j < k; ++j)
    rep.rank_chi2_pvalues.push_back(chi2_test_pvalue(bins[static_cast<std::size_t>(j)], expected_counts));
  return rep;
}

}  // namespace rope
