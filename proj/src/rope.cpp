#include "rope/rope.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include "rope/optim.hpp"
#include "rope/parallel.hpp"
#include "rope/rng.hpp"
#include "rope/stats.hpp"

namespace rope {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kWeightFloor = 1e-12;   // mixture components below this are skipped
constexpr double kRowSumTol = 1e-6;
constexpr double kNormEps = 1e-18;       // inside sqrt of the L2 objective

enum Stream : std::uint64_t {
  kTargets = 51,
  kSims = 52,
  kBanks = 53,
  kSbi = 54,
  kMlpInit = 55,
};

NseParams clone_nse(const NseParams& src) {
  NseParams dst;
  dst.input_shift = src.input_shift;
  dst.input_scale = src.input_scale;
  for (const auto& layer : src.net.layers) {
    DenseLayer copy;
    copy.weight = ad::Tensor::from_data(layer.weight.shape(),
                                        {layer.weight.data().begin(), layer.weight.data().end()},
                                        /*requires_grad=*/true);
    copy.bias = ad::Tensor::from_data(layer.bias.shape(),
                                      {layer.bias.data().begin(), layer.bias.data().end()},
                                      /*requires_grad=*/true);
    dst.net.layers.push_back(std::move(copy));
  }
  return dst;
}

std::vector<ad::Tensor> nse_parameters(const NseParams& nse) {
  std::vector<ad::Tensor> params;
  for (const auto& layer : nse.net.layers) {
    params.push_back(layer.weight);
    params.push_back(layer.bias);
  }
  return params;
}

// Monte-Carlo targets E[h(S(theta, .))] for every pair of a labeled set.
std::vector<double> summary_targets(const FlowModel& base, const Dataset& ds, int mc_samples,
                                    std::uint64_t seed) {
  const int l = base.summary_dim;
  const TaskSpec& spec = task_spec(ds.task);
  std::vector<double> targets(static_cast<std::size_t>(ds.n * l), 0.0);
  std::vector<double> sims(static_cast<std::size_t>(mc_samples) * spec.obs_dim);
  for (std::int64_t i = 0; i < ds.n; ++i) {
    for (int m = 0; m < mc_samples; ++m) {
      const auto obs = simulate(ds.task, ds.theta_row(i),
                                mix_seed(mix_seed(seed, kTargets),
                                         static_cast<std::uint64_t>(i) * 1000003ULL +
                                             static_cast<std::uint64_t>(m)),
                                /*misspecified=*/false);
      std::copy(obs.values.begin(), obs.values.end(), sims.begin() + m * spec.obs_dim);
    }
    const auto h = nse_apply_raw(base.nse, {sims.data(), static_cast<std::size_t>(mc_samples) * spec.obs_dim},
                                 mc_samples);
    for (int j = 0; j < l; ++j) {
      double acc = 0.0;
      for (int m = 0; m < mc_samples; ++m) acc += h[static_cast<std::size_t>(m * l + j)];
      targets[static_cast<std::size_t>(i * l + j)] = acc / mc_samples;
    }
  }
  return targets;
}

// Summed L2 distance between g(x) and targets, computed without the tape.
double finetune_loss_raw(const NseParams& g, const Dataset& ds, std::span<const double> targets) {
  if (ds.n == 0) return 0.0;
  const int l = g.summary_dim();
  const auto s = nse_apply_raw(g, ds.obs, ds.n);
  double total = 0.0;
  for (std::int64_t i = 0; i < ds.n; ++i) {
    double sq = kNormEps;
    for (int j = 0; j < l; ++j) {
      const double d = s[static_cast<std::size_t>(i * l + j)] - targets[static_cast<std::size_t>(i * l + j)];
      sq += d * d;
    }
    total += std::sqrt(sq);
  }
  return total;
}

std::string dataset_hash(const Dataset& ds) {
  std::vector<unsigned char> bytes;
  bytes.reserve(ds.theta.size() * sizeof(double) + ds.obs.size() * sizeof(double));
  const auto append = [&bytes](const std::vector<double>& v) {
    const auto* p = reinterpret_cast<const unsigned char*>(v.data());
    bytes.insert(bytes.end(), p, p + v.size() * sizeof(double));
  };
  append(ds.theta);
  append(ds.obs);
  return content_hash_hex(bytes);
}

}  // namespace

FineTuneResult finetune_nse(const FlowModel& base, const Dataset& calibration,
                            const Dataset& calibration_val, const FineTuneConfig& cfg) {
  if (calibration.n == 0) throw std::invalid_argument("finetune_nse: empty calibration set");
  if (cfg.steps < 1 || cfg.mc_samples < 1 || !(cfg.learning_rate > 0.0))
    throw std::invalid_argument("finetune_nse: invalid config");
  if (calibration.provenance != Provenance::real)
    throw std::invalid_argument("finetune_nse: calibration pairs must be real-provenance");

  const int l = base.summary_dim;
  const auto train_targets = summary_targets(base, calibration, cfg.mc_samples, cfg.seed);
  const auto val_targets = summary_targets(base, calibration_val, cfg.mc_samples,
                                           mix_seed(cfg.seed, 1));

  FineTuneResult result;
  result.tuned = clone_nse(base.nse);
  NseParams& g = result.tuned;
  auto params = nse_parameters(g);
  AdamState adam;
  adam.init(params);

  const bool select_on_val = calibration_val.n > 0;
  auto selection_loss = [&] {
    return select_on_val ? finetune_loss_raw(g, calibration_val, val_targets)
                         : finetune_loss_raw(g, calibration, train_targets);
  };
  result.initial_val_loss = selection_loss();
  result.best_val_loss = result.initial_val_loss;
  result.best_step = 0;
  std::vector<std::vector<double>> best_values;
  for (const auto& p : params) best_values.emplace_back(p.data().begin(), p.data().end());

  const auto n = calibration.n;
  auto target_t = ad::Tensor::from_data({n, l}, train_targets);
  for (std::int64_t step = 1; step <= cfg.steps; ++step) {
    {
      ad::Tape tape;
      auto obs_t = ad::Tensor::from_data({n, static_cast<std::int64_t>(calibration.obs_dim)},
                                         calibration.obs);
      auto diff = ad::sub(nse_apply(g, obs_t), target_t);
      auto sq = ad::add_const(ad::sum_cols(ad::square(diff)), kNormEps);
      auto norms = ad::exp_op(ad::scale(ad::log_op(sq), 0.5));
      auto loss = ad::sum(norms);
      ad::backward(loss);
      adam_step(params, adam, cfg.learning_rate);
      for (auto p : params) p.zero_grad();
    }
    const double val = selection_loss();
    if (val < result.best_val_loss) {
      result.best_val_loss = val;
      result.best_step = step;
      for (std::size_t i = 0; i < params.size(); ++i)
        best_values[i].assign(params[i].data().begin(), params[i].data().end());
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].mutable_data();
    std::copy(best_values[i].begin(), best_values[i].end(), dst.begin());
  }
  return result;
}

CostMatrix build_cost(const NseParams& real_side, const NseParams& sim_side,
                      const Dataset& real_obs, const Dataset& sims) {
  if (real_side.summary_dim() != sim_side.summary_dim())
    throw std::invalid_argument("build_cost: summary dimensions differ");
  const int l = real_side.summary_dim();
  const auto g = nse_apply_raw(real_side, real_obs.obs, real_obs.n);
  const auto h = nse_apply_raw(sim_side, sims.obs, sims.n);
  CostMatrix cost;
  cost.rows = real_obs.n;
  cost.cols = sims.n;
  cost.description = "L2 between summary vectors";
  cost.values.resize(static_cast<std::size_t>(cost.rows * cost.cols));
  parallel_for(cost.rows, [&](std::int64_t i) {
    for (std::int64_t j = 0; j < cost.cols; ++j) {
      double sq = 0.0;
      for (int c = 0; c < l; ++c) {
        const double d = g[static_cast<std::size_t>(i * l + c)] - h[static_cast<std::size_t>(j * l + c)];
        sq += d * d;
      }
      cost.values[static_cast<std::size_t>(i * cost.cols + j)] = std::sqrt(sq);
    }
  });
  return cost;
}

// ---------------------------------------------------------------------------
// MixturePosterior

MixturePosterior::MixturePosterior(std::vector<double> weights, std::int64_t n_obs,
                                   std::int64_t n_components,
                                   std::shared_ptr<const FlowModel> flow,
                                   std::vector<double> component_summaries,
                                   std::int64_t bank_size, std::uint64_t bank_seed)
    : weights_(std::move(weights)),
      n_obs_(n_obs),
      n_components_(n_components),
      flow_(std::move(flow)),
      component_summaries_(std::move(component_summaries)),
      bank_size_(bank_size),
      bank_seed_(bank_seed),
      banks_(static_cast<std::size_t>(n_components)) {
  if (weights_.size() != static_cast<std::size_t>(n_obs_ * n_components_))
    throw std::invalid_argument("MixturePosterior: weight matrix has wrong size");
  for (std::int64_t i = 0; i < n_obs_; ++i) {
    double row_sum = 0.0;
    for (std::int64_t j = 0; j < n_components_; ++j) {
      const double w = weights_[static_cast<std::size_t>(i * n_components_ + j)];
      if (w < 0.0) throw std::invalid_argument("MixturePosterior: negative weight");
      row_sum += w;
    }
    if (std::fabs(row_sum - 1.0) > kRowSumTol)
      throw std::invalid_argument("MixturePosterior: weight row " + std::to_string(i) +
                                  " sums to " + std::to_string(row_sum));
  }
}

double MixturePosterior::log_prob(std::int64_t obs_index, std::span<const double> theta) const {
  const auto row = weight_row(obs_index);
  const int k = flow_->theta_dim, l = flow_->summary_dim;
  std::vector<std::int64_t> active;
  active.reserve(64);
  for (std::int64_t j = 0; j < n_components_; ++j)
    if (row[static_cast<std::size_t>(j)] >= kWeightFloor) active.push_back(j);
  if (active.empty()) return -kInf;

  const auto m = static_cast<std::int64_t>(active.size());
  std::vector<double> theta_rep(static_cast<std::size_t>(m * k));
  std::vector<double> summaries(static_cast<std::size_t>(m * l));
  for (std::int64_t r = 0; r < m; ++r) {
    std::copy(theta.begin(), theta.end(), theta_rep.begin() + r * k);
    const auto s = component_summary(active[static_cast<std::size_t>(r)]);
    std::copy(s.begin(), s.end(), summaries.begin() + r * l);
  }
  const auto lp = flow_log_prob(*flow_, theta_rep, summaries, m);
  double mx = -kInf;
  for (std::int64_t r = 0; r < m; ++r)
    mx = std::max(mx, lp[static_cast<std::size_t>(r)] + std::log(row[static_cast<std::size_t>(active[static_cast<std::size_t>(r)])]));
  if (!std::isfinite(mx)) return -kInf;
  double acc = 0.0;
  for (std::int64_t r = 0; r < m; ++r)
    acc += std::exp(lp[static_cast<std::size_t>(r)] +
                    std::log(row[static_cast<std::size_t>(active[static_cast<std::size_t>(r)])]) - mx);
  return mx + std::log(acc);
}

std::span<const double> MixturePosterior::bank(std::int64_t j) const {
  std::lock_guard<std::mutex> lock(bank_mutex_);
  auto& b = banks_[static_cast<std::size_t>(j)];
  if (b.empty())
    b = flow_sample(*flow_, component_summary(j), bank_size_,
                    mix_seed(mix_seed(bank_seed_, kBanks), static_cast<std::uint64_t>(j)));
  return b;
}

void MixturePosterior::sample(std::int64_t obs_index, std::int64_t n, std::uint64_t seed,
                              double* out) const {
  if (n < 1) throw std::invalid_argument("MixturePosterior::sample: need at least one draw");
  const auto row = weight_row(obs_index);
  const int k = flow_->theta_dim;
  std::vector<double> cdf(static_cast<std::size_t>(n_components_));
  double acc = 0.0;
  for (std::int64_t j = 0; j < n_components_; ++j) {
    acc += row[static_cast<std::size_t>(j)];
    cdf[static_cast<std::size_t>(j)] = acc;
  }
  auto rng = make_rng(mix_seed(seed, static_cast<std::uint64_t>(obs_index)), 45);
  std::vector<std::int64_t> component(static_cast<std::size_t>(n));
  std::vector<std::int64_t> counts(static_cast<std::size_t>(n_components_), 0);
  for (std::int64_t i = 0; i < n; ++i) {
    const double u = uniform_real(rng, 0.0, acc);
    const auto it = std::lower_bound(cdf.begin(), cdf.end(), u);
    const auto j = static_cast<std::int64_t>(std::distance(cdf.begin(), it));
    component[static_cast<std::size_t>(i)] = std::min(j, n_components_ - 1);
    ++counts[static_cast<std::size_t>(component[static_cast<std::size_t>(i)])];
  }

  // Per component: distinct bank rows via partial Fisher-Yates; requests
  // beyond the bank size are topped up with fresh flow draws.
  std::vector<std::vector<double>> reserved(static_cast<std::size_t>(n_components_));
  for (std::int64_t j = 0; j < n_components_; ++j) {
    const std::int64_t need = counts[static_cast<std::size_t>(j)];
    if (need == 0) continue;
    auto& slot = reserved[static_cast<std::size_t>(j)];
    slot.reserve(static_cast<std::size_t>(need * k));
    const auto b = bank(j);
    const std::int64_t from_bank = std::min(need, bank_size_);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(bank_size_));
    std::iota(idx.begin(), idx.end(), 0);
    for (std::int64_t d = 0; d < from_bank; ++d) {
      const auto pick = d + static_cast<std::int64_t>(uniform_index(rng, static_cast<std::uint64_t>(bank_size_ - d)));
      std::swap(idx[static_cast<std::size_t>(d)], idx[static_cast<std::size_t>(pick)]);
      const double* src = b.data() + idx[static_cast<std::size_t>(d)] * k;
      slot.insert(slot.end(), src, src + k);
    }
    if (need > from_bank) {
      const auto fresh = flow_sample(*flow_, component_summary(j), need - from_bank,
                                     mix_seed(mix_seed(seed, 46), static_cast<std::uint64_t>(j)));
      slot.insert(slot.end(), fresh.begin(), fresh.end());
    }
  }

  std::vector<std::int64_t> cursor(static_cast<std::size_t>(n_components_), 0);
  for (std::int64_t i = 0; i < n; ++i) {
    const auto j = component[static_cast<std::size_t>(i)];
    const double* src = reserved[static_cast<std::size_t>(j)].data() + cursor[static_cast<std::size_t>(j)] * k;
    std::copy_n(src, k, out + i * k);
    ++cursor[static_cast<std::size_t>(j)];
  }
}

std::vector<double> MixturePosterior::pooled_sample(std::int64_t n, std::uint64_t seed) const {
  const int k = flow_->theta_dim;
  // Cumulative rows once; draws are grouped by component and sampled from the
  // flow directly so the diagnostic does not share state with the banks.
  std::vector<double> cdf(weights_.size());
  for (std::int64_t i = 0; i < n_obs_; ++i) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < n_components_; ++j) {
      acc += weights_[static_cast<std::size_t>(i * n_components_ + j)];
      cdf[static_cast<std::size_t>(i * n_components_ + j)] = acc;
    }
  }
  auto rng = make_rng(seed, 47);
  std::vector<std::int64_t> counts(static_cast<std::size_t>(n_components_), 0);
  for (std::int64_t d = 0; d < n; ++d) {
    const auto i = static_cast<std::int64_t>(uniform_index(rng, static_cast<std::uint64_t>(n_obs_)));
    const double total = cdf[static_cast<std::size_t>((i + 1) * n_components_ - 1)];
    const double u = uniform_real(rng, 0.0, total);
    const auto begin = cdf.begin() + i * n_components_;
    const auto it = std::lower_bound(begin, begin + n_components_, u);
    const auto j = std::min<std::int64_t>(std::distance(begin, it), n_components_ - 1);
    ++counts[static_cast<std::size_t>(j)];
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(n * k));
  for (std::int64_t j = 0; j < n_components_; ++j) {
    if (counts[static_cast<std::size_t>(j)] == 0) continue;
    const auto draws = flow_sample(*flow_, component_summary(j), counts[static_cast<std::size_t>(j)],
                                   mix_seed(mix_seed(seed, 48), static_cast<std::uint64_t>(j)));
    out.insert(out.end(), draws.begin(), draws.end());
  }
  return out;
}

std::shared_ptr<MixturePosterior> assemble_posterior(const Coupling& coupling,
                                                     std::shared_ptr<const FlowModel> flow,
                                                     const Dataset& sims, std::int64_t bank_size,
                                                     std::uint64_t bank_seed) {
  if (coupling.cols != sims.n)
    throw std::invalid_argument("assemble_posterior: coupling has " +
                                std::to_string(coupling.cols) + " columns for " +
                                std::to_string(sims.n) + " simulations");
  std::vector<double> alpha(coupling.p.size());
  const double n_o = static_cast<double>(coupling.rows);
  for (std::int64_t i = 0; i < coupling.rows; ++i) {
    double row_sum = 0.0;
    for (std::int64_t j = 0; j < coupling.cols; ++j) {
      const auto idx = static_cast<std::size_t>(i * coupling.cols + j);
      alpha[idx] = n_o * coupling.p[idx];
      row_sum += alpha[idx];
    }
    if (std::fabs(row_sum - 1.0) > kRowSumTol)
      throw std::invalid_argument("assemble_posterior: coupling row " + std::to_string(i) +
                                  " violates the marginal constraint (sum " +
                                  std::to_string(row_sum) + ")");
  }
  auto summaries = nse_apply_raw(flow->nse, sims.obs, sims.n);
  return std::make_shared<MixturePosterior>(std::move(alpha), coupling.rows, coupling.cols,
                                            std::move(flow), std::move(summaries), bank_size,
                                            bank_seed);
}

// ---------------------------------------------------------------------------
// Pipeline

RopeResult run_rope(std::shared_ptr<const FlowModel> model, const Dataset& calibration,
                    const Dataset& calibration_val, const Dataset& test, std::uint64_t seed,
                    const RopeConfig& cfg) {
  RopeResult result;
  FineTuneResult ft;
  if (cfg.variant == RopeVariant::ot_only) {
    result.tuned = clone_nse(model->nse);
  } else {
    FineTuneConfig ft_cfg = cfg.finetune;
    ft_cfg.seed = mix_seed(seed, 61);
    ft = finetune_nse(*model, calibration, calibration_val, ft_cfg);
    result.tuned = ft.tuned;
  }

  nlohmann::json prov;
  prov["gamma"] = cfg.gamma;
  prov["tau"] = cfg.tau;
  prov["variant"] = cfg.variant == RopeVariant::full
                        ? "full"
                        : (cfg.variant == RopeVariant::ot_only ? "ot_only" : "tuning_only");
  prov["seed"] = seed;
  prov["task"] = task_spec(test.task).name;
  prov["n_calibration"] = calibration.n + calibration_val.n;
  prov["n_test"] = test.n;
  prov["finetune"] = {{"learning_rate", cfg.finetune.learning_rate},
                      {"steps", cfg.finetune.steps},
                      {"mc_samples", cfg.finetune.mc_samples},
                      {"initial_val_loss", ft.initial_val_loss},
                      {"best_val_loss", ft.best_val_loss},
                      {"best_step", ft.best_step}};
  prov["hashes"] = {{"calibration", dataset_hash(calibration)},
                    {"calibration_val", dataset_hash(calibration_val)},
                    {"test", dataset_hash(test)}};

  if (cfg.variant == RopeVariant::tuning_only) {
    const auto summaries = nse_apply_raw(result.tuned, test.obs, test.n);
    result.posterior = std::make_shared<FlowPosterior>(model, summaries, test.n);
    result.provenance_json = prov.dump(2);
    return result;
  }

  const std::int64_t n_sims = cfg.n_sims > 0 ? cfg.n_sims : test.n;
  const Dataset sims = generate_dataset(test.task, n_sims, mix_seed(seed, kSims),
                                        /*misspecified=*/false);
  const CostMatrix cost = build_cost(result.tuned, model->nse, test, sims);
  result.coupling = sinkhorn_semibalanced(cost, cfg.gamma, cfg.tau, cfg.sinkhorn);
  result.mixture = assemble_posterior(result.coupling, model, sims, cfg.bank_size,
                                      mix_seed(seed, 62));
  result.posterior = result.mixture;

  prov["n_sims"] = n_sims;
  prov["hashes"]["simulations"] = dataset_hash(sims);
  prov["coupling"] = {{"iterations", result.coupling.iterations},
                      {"converged", result.coupling.converged},
                      {"marginal_error", result.coupling.marginal_error}};
  result.provenance_json = prov.dump(2);
  return result;
}

// ---------------------------------------------------------------------------
// Baselines

std::shared_ptr<PosteriorEstimate> baseline_prior(Task task, const Dataset& test) {
  return std::make_shared<PriorPosterior>(task, test.n);
}

std::shared_ptr<PosteriorEstimate> baseline_npe_direct(std::shared_ptr<const FlowModel> model,
                                                       const Dataset& test) {
  auto summaries = nse_apply_raw(model->nse, test.obs, test.n);
  return std::make_shared<FlowPosterior>(std::move(model), std::move(summaries), test.n);
}

std::shared_ptr<PosteriorEstimate> baseline_jnpe(Task task, const Dataset& calibration,
                                                 const Dataset& calibration_val,
                                                 const Dataset& test, const TrainConfig& cfg) {
  if (calibration.n == 0) throw std::invalid_argument("baseline_jnpe: empty calibration set");
  if (calibration_val.n == 0)
    throw std::invalid_argument("baseline_jnpe: empty calibration-validation split");
  FlowArch arch;
  arch.n_layers = cfg.n_flow_layers;
  FlowModel model = make_flow_model(task, cfg.seed, arch);
  auto trained = std::make_shared<FlowModel>(
      train_flow_loop(std::move(model), task, cfg, &calibration, &calibration_val, nullptr));
  auto summaries = nse_apply_raw(trained->nse, test.obs, test.n);
  return std::make_shared<FlowPosterior>(std::move(trained), std::move(summaries), test.n);
}

std::shared_ptr<PosteriorEstimate> baseline_mlp(Task task, const Dataset& calibration,
                                                const Dataset& calibration_val,
                                                const Dataset& test,
                                                const MlpBaselineConfig& cfg) {
  if (calibration.n == 0) throw std::invalid_argument("baseline_mlp: empty calibration set");
  if (calibration_val.n == 0)
    throw std::invalid_argument(
        "baseline_mlp: calibration set too small for a validation split (need at least 5 pairs)");
  const TaskSpec& spec = task_spec(task);
  const int k = spec.theta_dim;

  // Same backbone as the statistic estimator, with a Gaussian head.
  auto rng = make_rng(cfg.seed, kMlpInit);
  std::vector<int> dims{spec.obs_dim};
  const std::vector<int> hidden = task == Task::pendulum ? std::vector<int>{256, 128, 32}
                                                         : std::vector<int>{64, 64, 32};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(2 * k);
  NseParams net;
  net.net = make_mlp(dims, rng);
  {
    // Whitening from the calibration inputs.
    net.input_shift.assign(static_cast<std::size_t>(spec.obs_dim), 0.0);
    net.input_scale.assign(static_cast<std::size_t>(spec.obs_dim), 1.0);
    for (int j = 0; j < spec.obs_dim; ++j) {
      double mean = 0.0;
      for (std::int64_t i = 0; i < calibration.n; ++i) mean += calibration.obs_row(i)[static_cast<std::size_t>(j)];
      mean /= static_cast<double>(calibration.n);
      double var = 0.0;
      for (std::int64_t i = 0; i < calibration.n; ++i) {
        const double d = calibration.obs_row(i)[static_cast<std::size_t>(j)] - mean;
        var += d * d;
      }
      var /= static_cast<double>(std::max<std::int64_t>(1, calibration.n - 1));
      net.input_shift[static_cast<std::size_t>(j)] = mean;
      net.input_scale[static_cast<std::size_t>(j)] = std::max(1e-8, std::sqrt(var));
    }
  }

  auto params = nse_parameters(net);
  AdamState adam;
  adam.init(params);

  // Gaussian log likelihood of a labeled set under the current head.
  auto gaussian_ll = [&](const Dataset& ds) {
    const auto out = nse_apply_raw(net, ds.obs, ds.n);
    double total = 0.0;
    for (std::int64_t i = 0; i < ds.n; ++i)
      for (int j = 0; j < k; ++j) {
        const double mu = out[static_cast<std::size_t>(i * 2 * k + j)];
        const double lv = 7.0 * std::tanh(out[static_cast<std::size_t>(i * 2 * k + k + j)] / 7.0);
        const double d = ds.theta_row(i)[static_cast<std::size_t>(j)] - mu;
        total += -0.5 * (lv + d * d * std::exp(-lv) + std::log(2.0 * std::numbers::pi));
      }
    return total / static_cast<double>(ds.n);
  };

  double best_val = gaussian_ll(calibration_val);
  std::vector<std::vector<double>> best_values;
  for (const auto& p : params) best_values.emplace_back(p.data().begin(), p.data().end());

  const std::int64_t n = calibration.n;
  auto theta_t = ad::Tensor::from_data({n, k}, calibration.theta);
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    {
      ad::Tape tape;
      auto obs_t = ad::Tensor::from_data({n, static_cast<std::int64_t>(calibration.obs_dim)},
                                         calibration.obs);
      auto out = nse_apply(net, obs_t);
      auto mu = ad::slice_cols(out, 0, k);
      auto lv = ad::scale(ad::tanh_op(ad::scale(ad::slice_cols(out, k, 2 * k), 1.0 / 7.0)), 7.0);
      auto diff = ad::sub(theta_t, mu);
      auto nll = ad::add(lv, ad::mul(ad::square(diff), ad::exp_op(ad::neg(lv))));
      auto loss = ad::scale(ad::sum(nll), 0.5 / static_cast<double>(n));
      ad::backward(loss);
      adam_step(params, adam, cfg.learning_rate);
      for (auto p : params) p.zero_grad();
    }
    const double val = gaussian_ll(calibration_val);
    if (val > best_val) {
      best_val = val;
      for (std::size_t i = 0; i < params.size(); ++i)
        best_values[i].assign(params[i].data().begin(), params[i].data().end());
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].mutable_data();
    std::copy(best_values[i].begin(), best_values[i].end(), dst.begin());
  }

  const auto out = nse_apply_raw(net, test.obs, test.n);
  std::vector<double> means(static_cast<std::size_t>(test.n * k));
  std::vector<double> log_vars(static_cast<std::size_t>(test.n * k));
  for (std::int64_t i = 0; i < test.n; ++i)
    for (int j = 0; j < k; ++j) {
      means[static_cast<std::size_t>(i * k + j)] = out[static_cast<std::size_t>(i * 2 * k + j)];
      log_vars[static_cast<std::size_t>(i * k + j)] =
          7.0 * std::tanh(out[static_cast<std::size_t>(i * 2 * k + k + j)] / 7.0);
    }
  return std::make_shared<GaussianPosterior>(std::move(means), std::move(log_vars), k);
}

std::shared_ptr<PosteriorEstimate> sbi_reference(std::shared_ptr<const FlowModel> model,
                                                 const Dataset& test, std::uint64_t seed) {
  const TaskSpec& spec = task_spec(test.task);
  std::vector<double> synthetic(static_cast<std::size_t>(test.n * spec.obs_dim));
  for (std::int64_t i = 0; i < test.n; ++i) {
    const auto obs = simulate(test.task, test.theta_row(i),
                              mix_seed(mix_seed(seed, kSbi), static_cast<std::uint64_t>(i)),
                              /*misspecified=*/false);
    std::copy(obs.values.begin(), obs.values.end(), synthetic.begin() + i * spec.obs_dim);
  }
  auto summaries = nse_apply_raw(model->nse, synthetic, test.n);
  return std::make_shared<FlowPosterior>(std::move(model), std::move(summaries), test.n);
}

}  // namespace rope
