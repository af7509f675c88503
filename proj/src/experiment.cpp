#include "rope/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "rope/rng.hpp"
#include "rope/stats.hpp"

namespace rope {

namespace {

enum Stream : std::uint64_t {
  kRep = 71,
  kTestSet = 72,
  kPool = 73,
  kSplit = 74,
  kNpeTrain = 75,
  kRun = 76,
  kMetrics = 77,
  kCorner = 78,
};

const std::set<std::string> kKnownMethods{"prior", "sbi",     "npe",     "jnpe",       "mlp",
                                          "rope",  "rope_star", "ot_only", "tuning_only"};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

struct EffectiveCell {
  std::string method;
  std::int64_t n_calibration;  // 0 when the method ignores the calibration set
  double gamma;                // 0 when the method has no OT step
  double tau;
  int repetition;

  bool operator<(const EffectiveCell& o) const {
    return std::tie(method, n_calibration, gamma, tau, repetition) <
           std::tie(o.method, o.n_calibration, o.gamma, o.tau, o.repetition);
  }
};

bool uses_calibration(const std::string& m) {
  return m == "jnpe" || m == "mlp" || m == "rope" || m == "rope_star" || m == "tuning_only";
}
bool uses_ot(const std::string& m) {
  return m == "rope" || m == "rope_star" || m == "ot_only";
}
bool needs_npe_model(const std::string& m) { return m != "prior" && m != "jnpe" && m != "mlp"; }

}  // namespace

void ExperimentConfig::validate() const {
  if (test_size < 1) throw std::invalid_argument("experiment: test_size must be at least 1");
  if (repetitions < 1) throw std::invalid_argument("experiment: repetitions must be at least 1");
  if (n_calibration.empty() || gammas.empty() || taus.empty() || methods.empty())
    throw std::invalid_argument("experiment: empty grid axis");
  for (const auto& m : methods)
    if (!kKnownMethods.count(m)) throw std::invalid_argument("experiment: unknown method '" + m + "'");
  for (double g : gammas)
    if (!(g > 0.0)) throw std::invalid_argument("experiment: gamma must be positive");
  for (double t : taus)
    if (!(t > 0.0) || t > 1.0) throw std::invalid_argument("experiment: tau must be in (0, 1]");
}

ExperimentConfig ExperimentConfig::defaults(Task t) {
  ExperimentConfig cfg;
  cfg.task = t;
  return cfg;
}

namespace {

void apply_json(ExperimentConfig& cfg, const nlohmann::json& j) {
  if (j.contains("task")) cfg.task = task_from_name(j.at("task").get<std::string>());
  if (j.contains("n_calibration")) cfg.n_calibration = j.at("n_calibration").get<std::vector<std::int64_t>>();
  if (j.contains("gamma")) cfg.gammas = j.at("gamma").get<std::vector<double>>();
  if (j.contains("tau")) cfg.taus = j.at("tau").get<std::vector<double>>();
  if (j.contains("methods")) cfg.methods = j.at("methods").get<std::vector<std::string>>();
  if (j.contains("test_size")) cfg.test_size = j.at("test_size").get<std::int64_t>();
  if (j.contains("repetitions")) cfg.repetitions = j.at("repetitions").get<int>();
  if (j.contains("master_seed")) cfg.master_seed = j.at("master_seed").get<std::uint64_t>();
  if (j.contains("acauc_samples")) cfg.acauc_samples = j.at("acauc_samples").get<int>();
  if (j.contains("record_timing")) cfg.record_timing = j.at("record_timing").get<bool>();
  if (j.contains("write_coverage")) cfg.write_coverage = j.at("write_coverage").get<bool>();
  if (j.contains("coverage_levels")) cfg.coverage_levels = j.at("coverage_levels").get<std::vector<double>>();
  if (j.contains("corner_dump_count")) cfg.corner_dump_count = j.at("corner_dump_count").get<int>();
  if (j.contains("bank_size")) cfg.bank_size = j.at("bank_size").get<std::int64_t>();
  if (j.contains("train")) {
    const auto& t = j.at("train");
    if (t.contains("batch_size")) cfg.train.batch_size = t.at("batch_size").get<std::int64_t>();
    if (t.contains("learning_rate")) cfg.train.learning_rate = t.at("learning_rate").get<double>();
    if (t.contains("max_steps")) cfg.train.max_steps = t.at("max_steps").get<std::int64_t>();
    if (t.contains("val_interval")) cfg.train.val_interval = t.at("val_interval").get<std::int64_t>();
    if (t.contains("val_size")) cfg.train.val_size = t.at("val_size").get<std::int64_t>();
    if (t.contains("n_flow_layers")) cfg.train.n_flow_layers = t.at("n_flow_layers").get<int>();
  }
  if (j.contains("finetune")) {
    const auto& t = j.at("finetune");
    if (t.contains("learning_rate")) cfg.finetune.learning_rate = t.at("learning_rate").get<double>();
    if (t.contains("steps")) cfg.finetune.steps = t.at("steps").get<std::int64_t>();
    if (t.contains("mc_samples")) cfg.finetune.mc_samples = t.at("mc_samples").get<int>();
  }
  if (j.contains("mlp")) {
    const auto& t = j.at("mlp");
    if (t.contains("learning_rate")) cfg.mlp.learning_rate = t.at("learning_rate").get<double>();
    if (t.contains("steps")) cfg.mlp.steps = t.at("steps").get<std::int64_t>();
  }
  if (j.contains("sinkhorn")) {
    const auto& t = j.at("sinkhorn");
    if (t.contains("tol")) cfg.sinkhorn.tol = t.at("tol").get<double>();
    if (t.contains("max_iters")) cfg.sinkhorn.max_iters = t.at("max_iters").get<std::int64_t>();
  }
  if (j.contains("true_theta_box")) {
    ThetaBox box;
    box.lo = j.at("true_theta_box").at("lo").get<std::vector<double>>();
    box.hi = j.at("true_theta_box").at("hi").get<std::vector<double>>();
    cfg.true_theta_box = box;
  }
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("experiment config: cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("experiment config: " + path.string() + ": " + e.what());
  }
  ExperimentConfig cfg;
  apply_json(cfg, j);
  cfg.validate();
  return cfg;
}

std::string ExperimentConfig::to_json() const {
  nlohmann::json j;
  j["task"] = task_spec(task).name;
  j["n_calibration"] = n_calibration;
  j["gamma"] = gammas;
  j["tau"] = taus;
  j["methods"] = methods;
  j["test_size"] = test_size;
  j["repetitions"] = repetitions;
  j["master_seed"] = master_seed;
  j["acauc_samples"] = acauc_samples;
  j["record_timing"] = record_timing;
  j["bank_size"] = bank_size;
  j["train"] = {{"batch_size", train.batch_size},
                {"learning_rate", train.learning_rate},
                {"max_steps", train.max_steps},
                {"val_interval", train.val_interval},
                {"val_size", train.val_size},
                {"n_flow_layers", train.n_flow_layers}};
  j["finetune"] = {{"learning_rate", finetune.learning_rate},
                   {"steps", finetune.steps},
                   {"mc_samples", finetune.mc_samples}};
  j["mlp"] = {{"learning_rate", mlp.learning_rate}, {"steps", mlp.steps}};
  j["sinkhorn"] = {{"tol", sinkhorn.tol}, {"max_iters", sinkhorn.max_iters}};
  if (true_theta_box)
    j["true_theta_box"] = {{"lo", true_theta_box->lo}, {"hi", true_theta_box->hi}};
  return j.dump(2);
}

namespace {

struct RepContext {
  std::uint64_t rep_seed = 0;
  Dataset test;
  Dataset pool;
  std::shared_ptr<const FlowModel> model;               // trained NPE, lazily
  std::map<std::int64_t, Splits> splits;                // by n_calibration
  std::map<std::int64_t, NseParams> tuned;              // fine-tuned NSE by n_calibration
};

std::shared_ptr<PosteriorEstimate> build_method(const ExperimentConfig& cfg, RepContext& ctx,
                                                const EffectiveCell& cell) {
  const auto& m = cell.method;
  const std::uint64_t run_seed = mix_seed(ctx.rep_seed, kRun);
  if (m == "prior") return baseline_prior(cfg.task, ctx.test);
  if (m == "npe") return baseline_npe_direct(ctx.model, ctx.test);
  if (m == "sbi") return sbi_reference(ctx.model, ctx.test, ctx.rep_seed);
  const Splits& splits = ctx.splits.at(cell.n_calibration == 0 ? cfg.n_calibration.front()
                                                               : cell.n_calibration);
  if (m == "jnpe") {
    TrainConfig tc = cfg.train;
    tc.seed = mix_seed(ctx.rep_seed, 81);
    return baseline_jnpe(cfg.task, splits.calibration, splits.calibration_val, ctx.test, tc);
  }
  if (m == "mlp") {
    MlpBaselineConfig mc = cfg.mlp;
    mc.seed = mix_seed(ctx.rep_seed, 82);
    return baseline_mlp(cfg.task, splits.calibration, splits.calibration_val, ctx.test, mc);
  }
  // RoPE family.
  RopeConfig rc;
  rc.gamma = cell.gamma > 0.0 ? cell.gamma : 0.5;
  rc.tau = cell.tau > 0.0 ? cell.tau : 1.0;
  rc.finetune = cfg.finetune;
  rc.sinkhorn = cfg.sinkhorn;
  rc.bank_size = cfg.bank_size;
  if (m == "ot_only") {
    rc.variant = RopeVariant::ot_only;
    return run_rope(ctx.model, splits.calibration, splits.calibration_val, ctx.test, run_seed, rc)
        .posterior;
  }
  rc.variant = m == "tuning_only" ? RopeVariant::tuning_only : RopeVariant::full;
  // The fine-tuned statistic is shared across gamma/tau cells.
  auto it = ctx.tuned.find(cell.n_calibration);
  if (it == ctx.tuned.end()) {
    FineTuneConfig fc = cfg.finetune;
    fc.seed = mix_seed(mix_seed(run_seed, 61), 0);
    auto ft = finetune_nse(*ctx.model, splits.calibration, splits.calibration_val, fc);
    it = ctx.tuned.emplace(cell.n_calibration, std::move(ft.tuned)).first;
  }
  if (m == "tuning_only") {
    const auto summaries = nse_apply_raw(it->second, ctx.test.obs, ctx.test.n);
    return std::make_shared<FlowPosterior>(ctx.model, summaries, ctx.test.n);
  }
  // rope / rope_star: couple with pre-tuned summaries.
  const std::int64_t n_sims = ctx.test.n;
  const Dataset sims = generate_dataset(cfg.task, n_sims, mix_seed(run_seed, 52), false);
  const CostMatrix cost = build_cost(it->second, ctx.model->nse, ctx.test, sims);
  const Coupling coupling = sinkhorn_semibalanced(cost, rc.gamma, rc.tau, rc.sinkhorn);
  return assemble_posterior(coupling, ctx.model, sims, rc.bank_size, mix_seed(run_seed, 62));
}

void write_corner_dumps(const ExperimentConfig& cfg, const PosteriorEstimate& est,
                        const Dataset& test, const EffectiveCell& cell,
                        const std::filesystem::path& plot_dir) {
  if (cell.repetition != 0 || cfg.corner_dump_count <= 0) return;
  auto rng = make_rng(cfg.master_seed, kCorner);
  const int k = est.theta_dim();
  for (int d = 0; d < cfg.corner_dump_count; ++d) {
    const auto obs = static_cast<std::int64_t>(uniform_index(rng, static_cast<std::uint64_t>(test.n)));
    std::vector<double> draws(static_cast<std::size_t>(cfg.acauc_samples) * k);
    est.sample(obs, cfg.acauc_samples, mix_seed(cfg.master_seed, kCorner + 1 + static_cast<std::uint64_t>(d)),
               draws.data());
    std::ostringstream name;
    name << "corner_" << cell.method << "_ncal" << cell.n_calibration << "_obs" << obs << ".tsv";
    std::ofstream out(plot_dir / name.str());
    out << "# theta_true =";
    for (double v : test.theta_row(obs)) out << ' ' << fmt("%.17g", v);
    out << "\n";
    for (int s = 0; s < cfg.acauc_samples; ++s) {
      for (int j = 0; j < k; ++j)
        out << fmt("%.10g", draws[static_cast<std::size_t>(s) * k + j]) << (j + 1 < k ? '\t' : '\n');
    }
  }
}

}  // namespace

std::vector<CellResult> run_experiment(const ExperimentConfig& cfg,
                                       const std::filesystem::path& out_dir) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  const auto plot_dir = out_dir / "plots";
  std::filesystem::create_directories(plot_dir);
  {
    std::ofstream cfg_out(out_dir / "config.json");
    cfg_out << cfg.to_json() << "\n";
  }
  std::ofstream results(out_dir / "results.tsv");
  results << "method\ttask\tn_calibration\tgamma\ttau\trepetition\tlpp\tlpp_stderr\tn_neg_inf\t"
             "acauc\twall_clock_s\tseed\n";
  std::ofstream failures(out_dir / "failures.tsv");
  failures << "method\tn_calibration\tgamma\ttau\trepetition\terror\n";
  std::ofstream coverage_out;
  if (cfg.write_coverage) {
    coverage_out.open(plot_dir / "coverage.tsv");
    coverage_out << "method\tn_calibration\tgamma\ttau\trepetition\tlevel\tcoverage\n";
  }

  const std::int64_t max_ncal =
      *std::max_element(cfg.n_calibration.begin(), cfg.n_calibration.end());
  std::vector<CellResult> rows;

  for (int rep = 0; rep < cfg.repetitions; ++rep) {
    RepContext ctx;
    ctx.rep_seed = mix_seed(mix_seed(cfg.master_seed, kRep), static_cast<std::uint64_t>(rep));
    ctx.test = generate_dataset(cfg.task, cfg.test_size, mix_seed(ctx.rep_seed, kTestSet),
                                /*misspecified=*/true, cfg.true_theta_box);
    ctx.test.role = SplitRole::test;
    ctx.pool = generate_dataset(cfg.task, max_ncal, mix_seed(ctx.rep_seed, kPool),
                                /*misspecified=*/true, cfg.true_theta_box);
    for (std::int64_t ncal : cfg.n_calibration)
      ctx.splits.emplace(ncal, make_splits(ctx.pool, ncal, 0, mix_seed(ctx.rep_seed, kSplit)));

    bool need_model = false;
    for (const auto& m : cfg.methods) need_model = need_model || needs_npe_model(m);
    if (need_model) {
      TrainConfig tc = cfg.train;
      tc.seed = mix_seed(ctx.rep_seed, kNpeTrain);
      ctx.model = std::make_shared<FlowModel>(train_npe(cfg.task, tc));
    }

    std::set<EffectiveCell> done;
    for (const auto& method : cfg.methods)
      for (std::int64_t ncal : cfg.n_calibration)
        for (double gamma : cfg.gammas)
          for (double tau : cfg.taus) {
            EffectiveCell cell;
            cell.method = method;
            cell.repetition = rep;
            cell.n_calibration = uses_calibration(method) ? ncal : 0;
            cell.gamma = uses_ot(method) ? gamma : 0.0;
            if (method == "rope" || method == "ot_only")
              cell.tau = 1.0;  // balanced by definition
            else if (method == "rope_star")
              cell.tau = tau < 1.0 ? tau : 0.9;
            else
              cell.tau = 0.0;
            if (!done.insert(cell).second) continue;

            CellResult row;
            row.method = method;
            row.n_calibration = cell.n_calibration;
            row.gamma = cell.gamma;
            row.tau = cell.tau;
            row.repetition = rep;
            row.seed = ctx.rep_seed;
            const auto t0 = std::chrono::steady_clock::now();
            try {
              const auto estimate = build_method(cfg, ctx, cell);
              row.lpp = compute_lpp(*estimate, ctx.test);
              row.acauc = compute_acauc(*estimate, ctx.test, cfg.acauc_samples,
                                        mix_seed(ctx.rep_seed, kMetrics));
              if (cfg.write_coverage) {
                const auto curve = coverage_curve(*estimate, ctx.test, cfg.coverage_levels,
                                                  cfg.acauc_samples, mix_seed(ctx.rep_seed, kMetrics));
                for (std::size_t li = 0; li < curve.levels.size(); ++li)
                  coverage_out << method << '\t' << cell.n_calibration << '\t'
                               << fmt("%g", cell.gamma) << '\t' << fmt("%g", cell.tau) << '\t'
                               << rep << '\t' << fmt("%.4f", curve.levels[li]) << '\t'
                               << fmt("%.6f", curve.averaged[li]) << '\n';
              }
              write_corner_dumps(cfg, *estimate, ctx.test, cell, plot_dir);
            } catch (const std::exception& e) {
              failures << method << '\t' << cell.n_calibration << '\t' << fmt("%g", cell.gamma)
                       << '\t' << fmt("%g", cell.tau) << '\t' << rep << '\t' << e.what() << '\n';
              failures.flush();
              continue;
            }
            const auto t1 = std::chrono::steady_clock::now();
            row.wall_clock_s = std::chrono::duration<double>(t1 - t0).count();
            rows.push_back(row);
            results << method << '\t' << task_spec(cfg.task).name << '\t' << cell.n_calibration
                    << '\t' << fmt("%g", cell.gamma) << '\t' << fmt("%g", cell.tau) << '\t' << rep
                    << '\t' << fmt("%.6f", row.lpp.mean) << '\t' << fmt("%.6f", row.lpp.stderr_)
                    << '\t' << row.lpp.n_neg_inf << '\t' << fmt("%.6f", row.acauc) << '\t'
                    << fmt("%.3f", cfg.record_timing ? row.wall_clock_s : 0.0) << '\t' << row.seed
                    << '\n';
            results.flush();
          }
  }

  // Aggregated plot data: mean and std over repetitions per effective cell.
  struct Agg {
    std::vector<double> lpp, acauc;
  };
  std::map<std::tuple<std::string, std::int64_t, double, double>, Agg> agg;
  for (const auto& row : rows) {
    auto& a = agg[{row.method, row.n_calibration, row.gamma, row.tau}];
    a.lpp.push_back(row.lpp.mean);
    a.acauc.push_back(row.acauc);
  }
  const auto write_plot = [&](const char* file, bool use_lpp) {
    std::ofstream out(plot_dir / file);
    out << "method\tn_calibration\tgamma\ttau\tmean\tstd\tn_reps\n";
    for (const auto& [key, a] : agg) {
      const auto& vals = use_lpp ? a.lpp : a.acauc;
      double mean = 0.0;
      for (double v : vals) mean += v;
      mean /= static_cast<double>(vals.size());
      double var = 0.0;
      for (double v : vals) var += (v - mean) * (v - mean);
      const double sd = vals.size() > 1 ? std::sqrt(var / static_cast<double>(vals.size() - 1)) : 0.0;
      out << std::get<0>(key) << '\t' << std::get<1>(key) << '\t' << fmt("%g", std::get<2>(key))
          << '\t' << fmt("%g", std::get<3>(key)) << '\t' << fmt("%.6f", mean) << '\t'
          << fmt("%.6f", sd) << '\t' << vals.size() << '\n';
    }
  };
  write_plot("lpp_vs_ncal.tsv", true);
  write_plot("acauc_vs_ncal.tsv", false);
  return rows;
}

}  // namespace rope
