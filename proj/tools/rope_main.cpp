#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "rope/experiment.hpp"
#include "rope/matrix_io.hpp"
#include "rope/rng.hpp"
#include "rope/rope.hpp"
#include "rope/stats.hpp"

namespace fs = std::filesystem;
using namespace rope;

namespace {

int cmd_simulate(const std::string& task_name, std::int64_t n, std::uint64_t seed,
                 bool misspecified, const std::string& out) {
  const Task task = task_from_name(task_name);
  const Dataset ds = generate_dataset(task, n, seed, misspecified);
  save_dataset(ds, out);
  std::printf("wrote %lld %s pairs (k=%lld, d=%lld, %s) to %s\n", static_cast<long long>(ds.n),
              task_name.c_str(), static_cast<long long>(ds.theta_dim),
              static_cast<long long>(ds.obs_dim), misspecified ? "real" : "simulated",
              out.c_str());
  return 0;
}

int cmd_train_npe(const std::string& task_name, const TrainConfig& cfg, const std::string& out) {
  const Task task = task_from_name(task_name);
  TrainReport report;
  const FlowModel model = train_npe(task, cfg, &report);
  save_checkpoint(model, out);
  std::printf("best validation log-prob %.4f at step %lld; checkpoint %s (hash %s)\n",
              report.best_val_log_prob, static_cast<long long>(report.best_step), out.c_str(),
              file_hash_hex(out).c_str());
  return 0;
}

int cmd_finetune(const std::string& checkpoint, const std::string& data_path,
                 std::int64_t n_calibration, std::uint64_t seed, const FineTuneConfig& cfg,
                 const std::string& out, const std::string& real_summaries_out,
                 const std::string& sim_summaries_out, const std::string& sims_path) {
  const FlowModel model = load_checkpoint(checkpoint);
  const Dataset pool = load_dataset(data_path);
  const auto splits = make_splits(pool, n_calibration > 0 ? n_calibration : pool.n, 0, seed);
  FineTuneConfig fc = cfg;
  fc.seed = seed;
  const auto result = finetune_nse(model, splits.calibration, splits.calibration_val, fc);
  save_nse(result.tuned, out);
  std::printf("fine-tuned statistic: validation loss %.6f -> %.6f (best step %lld); wrote %s\n",
              result.initial_val_loss, result.best_val_loss,
              static_cast<long long>(result.best_step), out.c_str());
  if (!real_summaries_out.empty()) {
    Matrix m{pool.n, model.summary_dim, nse_apply_raw(result.tuned, pool.obs, pool.n)};
    save_matrix(m, real_summaries_out);
  }
  if (!sim_summaries_out.empty()) {
    const Dataset sims = sims_path.empty()
                             ? generate_dataset(pool.task, pool.n, mix_seed(seed, 91), false)
                             : load_dataset(sims_path);
    Matrix m{sims.n, model.summary_dim, nse_apply_raw(model.nse, sims.obs, sims.n)};
    save_matrix(m, sim_summaries_out);
  }
  return 0;
}

int cmd_couple(const std::string& real_path, const std::string& sim_path, double gamma,
               double tau, const SinkhornOptions& opts, const std::string& out) {
  const Matrix real = load_matrix(real_path);
  const Matrix sim = load_matrix(sim_path);
  if (real.cols != sim.cols)
    throw std::invalid_argument("couple: summary dimensions differ (" + std::to_string(real.cols) +
                                " vs " + std::to_string(sim.cols) + ")");
  CostMatrix cost;
  cost.rows = real.rows;
  cost.cols = sim.rows;
  cost.description = "L2 between summary vectors";
  cost.values.resize(static_cast<std::size_t>(cost.rows * cost.cols));
  for (std::int64_t i = 0; i < cost.rows; ++i)
    for (std::int64_t j = 0; j < cost.cols; ++j) {
      double sq = 0.0;
      for (std::int64_t c = 0; c < real.cols; ++c) {
        const double d = real.values[static_cast<std::size_t>(i * real.cols + c)] -
                         sim.values[static_cast<std::size_t>(j * sim.cols + c)];
        sq += d * d;
      }
      cost.values[static_cast<std::size_t>(i * cost.cols + j)] = std::sqrt(sq);
    }
  const Coupling coupling = sinkhorn_semibalanced(cost, gamma, tau, opts);
  save_coupling(coupling, out);
  std::printf("coupling %lldx%lld: %s after %lld iterations (marginal error %.3g); wrote %s\n",
              static_cast<long long>(coupling.rows), static_cast<long long>(coupling.cols),
              coupling.converged ? "converged" : "NOT converged",
              static_cast<long long>(coupling.iterations), coupling.marginal_error, out.c_str());
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& coupling_path,
             const std::string& sims_path, const std::string& test_path, int samples,
             std::uint64_t seed, const std::string& out) {
  auto model = std::make_shared<FlowModel>(load_checkpoint(checkpoint));
  const Coupling coupling = load_coupling(coupling_path);
  const Dataset sims = load_dataset(sims_path);
  const Dataset test = load_dataset(test_path);
  const auto posterior = assemble_posterior(coupling, model, sims, 10000, seed);
  const auto lpp = compute_lpp(*posterior, test);
  const double acauc = compute_acauc(*posterior, test, samples, seed);
  std::printf("LPP %.4f +/- %.4f (%lld finite, %lld at -inf)  ACAUC %.4f\n", lpp.mean,
              lpp.stderr_, static_cast<long long>(lpp.n_finite),
              static_cast<long long>(lpp.n_neg_inf), acauc);
  if (!out.empty()) {
    nlohmann::json j{{"lpp", lpp.mean},
                     {"lpp_stderr", lpp.stderr_},
                     {"n_finite", lpp.n_finite},
                     {"n_neg_inf", lpp.n_neg_inf},
                     {"acauc", acauc},
                     {"seed", seed},
                     {"checkpoint_hash", file_hash_hex(checkpoint)}};
    std::ofstream o(out);
    o << j.dump(2) << "\n";
  }
  return 0;
}

int cmd_experiment(const std::string& task_name, const std::string& config_path,
                   std::uint64_t seed, bool seed_set, const std::string& out) {
  ExperimentConfig cfg = (config_path.empty() || config_path == "default")
                             ? ExperimentConfig::defaults(task_from_name(task_name))
                             : ExperimentConfig::from_json_file(config_path);
  if (!task_name.empty() && (config_path.empty() || config_path == "default"))
    cfg.task = task_from_name(task_name);
  if (seed_set) cfg.master_seed = seed;
  const auto rows = run_experiment(cfg, out);
  std::printf("experiment finished: %zu result rows under %s\n", rows.size(), out.c_str());
  return 0;
}

int cmd_selfcal(const std::string& task_name, double gamma, double tau, std::int64_t n,
                std::uint64_t seed, const std::string& checkpoint, const TrainConfig& tc,
                std::int64_t n_pooled) {
  const Task task = task_from_name(task_name);
  auto model = std::make_shared<FlowModel>(
      checkpoint.empty() ? train_npe(task, tc) : load_checkpoint(checkpoint));
  const Dataset test = generate_dataset(task, n, mix_seed(seed, 1), /*misspecified=*/true);
  const Dataset sims = generate_dataset(task, n, mix_seed(seed, 2), /*misspecified=*/false);
  const CostMatrix cost = build_cost(model->nse, model->nse, test, sims);
  const Coupling coupling = sinkhorn_semibalanced(cost, gamma, tau, {});
  const auto posterior = assemble_posterior(coupling, model, sims, 2048, seed);

  double worst_col = 0.0;
  const auto cols = coupling.col_sums();
  for (double c : cols) worst_col = std::max(worst_col, std::fabs(c - 1.0 / static_cast<double>(n)));
  const auto pooled = posterior->pooled_sample(n_pooled, mix_seed(seed, 3));
  const TaskSpec& spec = task_spec(task);
  std::vector<double> prior_draws(static_cast<std::size_t>(n_pooled) * spec.theta_dim);
  auto rng = make_rng(mix_seed(seed, 4), 0);
  for (std::int64_t i = 0; i < n_pooled; ++i)
    prior_sample_into(task, rng,
                      {prior_draws.data() + i * spec.theta_dim, static_cast<std::size_t>(spec.theta_dim)});
  std::printf("coupling: %s after %lld iterations; max |col_sum - 1/n_s| = %.3g\n",
              coupling.converged ? "converged" : "NOT converged",
              static_cast<long long>(coupling.iterations), worst_col);
  const std::int64_t n_draws = static_cast<std::int64_t>(pooled.size()) / spec.theta_dim;
  for (int j = 0; j < spec.theta_dim; ++j) {
    std::vector<double> a(static_cast<std::size_t>(n_draws));
    std::vector<double> b(static_cast<std::size_t>(n_pooled));
    for (std::int64_t i = 0; i < n_draws; ++i) a[static_cast<std::size_t>(i)] = pooled[static_cast<std::size_t>(i * spec.theta_dim + j)];
    for (std::int64_t i = 0; i < n_pooled; ++i) b[static_cast<std::size_t>(i)] = prior_draws[static_cast<std::size_t>(i * spec.theta_dim + j)];
    std::printf("dim %d: KS(pooled posterior, prior) = %.5f\n", j, ks_statistic(a, b));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Robust posterior estimation toolkit"};
  app.require_subcommand(1);

  std::string task = "pendulum", out, config_path, checkpoint, data_path;
  std::string real_path, sim_path, coupling_path, sims_path, test_path;
  std::string real_summaries_out, sim_summaries_out;
  std::uint64_t seed = 0;
  bool misspecified = false;
  std::int64_t n = 1000, n_calibration = 0, n_pooled = 100000;
  double gamma = 0.5, tau = 1.0;
  int acauc_samples = 1000;
  TrainConfig train_cfg;
  FineTuneConfig finetune_cfg;
  SinkhornOptions sinkhorn_opts;

  auto* sim = app.add_subcommand("simulate", "Generate a labeled dataset");
  sim->add_option("--task", task, "cs, sir or pendulum");
  sim->add_option("--n", n, "number of pairs");
  sim->add_option("--seed", seed);
  sim->add_flag("--misspecified", misspecified, "use the real-world variant");
  sim->add_option("--out", out)->required();

  auto* train = app.add_subcommand("train-npe", "Train the posterior estimator");
  train->add_option("--task", task);
  train->add_option("--seed", seed);
  train->add_option("--steps", train_cfg.max_steps);
  train->add_option("--batch", train_cfg.batch_size);
  train->add_option("--lr", train_cfg.learning_rate);
  train->add_option("--val-interval", train_cfg.val_interval);
  train->add_option("--val-size", train_cfg.val_size);
  train->add_option("--flow-layers", train_cfg.n_flow_layers);
  train->add_option("--out", out)->required();

  auto* ft = app.add_subcommand("finetune", "Fine-tune the statistic on a calibration set");
  ft->add_option("--checkpoint", checkpoint)->required();
  ft->add_option("--data", data_path, "labeled real dataset")->required();
  ft->add_option("--n-calibration", n_calibration, "pairs to use (default: all)");
  ft->add_option("--seed", seed);
  ft->add_option("--lr", finetune_cfg.learning_rate);
  ft->add_option("--steps", finetune_cfg.steps);
  ft->add_option("--mc-samples", finetune_cfg.mc_samples);
  ft->add_option("--out", out)->required();
  ft->add_option("--real-summaries-out", real_summaries_out,
                 "also write fine-tuned summaries of --data");
  ft->add_option("--sim-summaries-out", sim_summaries_out,
                 "also write base summaries of fresh (or --sims) simulations");
  ft->add_option("--sims", sims_path, "simulated dataset for --sim-summaries-out");

  auto* couple = app.add_subcommand("couple", "Solve the OT problem on saved summaries");
  couple->add_option("--real", real_path, "summary matrix of observations")->required();
  couple->add_option("--sim", sim_path, "summary matrix of simulations")->required();
  couple->add_option("--gamma", gamma);
  couple->add_option("--tau", tau);
  couple->add_option("--tol", sinkhorn_opts.tol);
  couple->add_option("--max-iters", sinkhorn_opts.max_iters);
  couple->add_option("--out", out)->required();

  auto* ev = app.add_subcommand("eval", "Metrics for a saved mixture posterior");
  ev->add_option("--checkpoint", checkpoint)->required();
  ev->add_option("--coupling", coupling_path)->required();
  ev->add_option("--sims", sims_path)->required();
  ev->add_option("--test", test_path)->required();
  ev->add_option("--samples", acauc_samples);
  ev->add_option("--seed", seed);
  ev->add_option("--out", out, "optional JSON report");

  auto* exp = app.add_subcommand("experiment", "Run a full benchmark grid");
  exp->add_option("--task", task);
  exp->add_option("--config", config_path, "JSON config path or 'default'");
  auto* seed_opt = exp->add_option("--seed", seed, "override the master seed");
  exp->add_option("--out", out)->required();

  auto* sc = app.add_subcommand("selfcal", "Marginal self-calibration diagnostic");
  sc->add_option("--task", task);
  sc->add_option("--gamma", gamma);
  sc->add_option("--tau", tau);
  sc->add_option("--n", n, "observations and simulations");
  sc->add_option("--pooled", n_pooled, "pooled posterior draws");
  sc->add_option("--seed", seed);
  sc->add_option("--checkpoint", checkpoint, "trained model (otherwise trains one)");
  sc->add_option("--train-steps", train_cfg.max_steps);

  CLI11_PARSE(app, argc, argv);

  try {
    if (sim->parsed()) return cmd_simulate(task, n, seed, misspecified, out);
    if (train->parsed()) {
      train_cfg.seed = seed;
      return cmd_train_npe(task, train_cfg, out);
    }
    if (ft->parsed())
      return cmd_finetune(checkpoint, data_path, n_calibration, seed, finetune_cfg, out,
                          real_summaries_out, sim_summaries_out, sims_path);
    if (couple->parsed()) return cmd_couple(real_path, sim_path, gamma, tau, sinkhorn_opts, out);
    if (ev->parsed())
      return cmd_eval(checkpoint, coupling_path, sims_path, test_path, acauc_samples, seed, out);
    if (exp->parsed()) return cmd_experiment(task, config_path, seed, !seed_opt->empty(), out);
    if (sc->parsed()) {
      train_cfg.seed = seed;
      return cmd_selfcal(task, gamma, tau, n, seed, checkpoint, train_cfg, n_pooled);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
