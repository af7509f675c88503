#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <set>

#include "doctest.h"
#include "rope/rng.hpp"
#include "rope/rope.hpp"

using namespace rope;

namespace {

std::shared_ptr<FlowModel> small_model(Task task, std::uint64_t seed) {
  FlowArch arch;
  arch.nse_hidden = {32, 16};
  arch.conditioner_hidden = {16, 16};
  arch.n_layers = 3;
  return std::make_shared<FlowModel>(make_flow_model(task, seed, arch, /*n_whiten=*/256));
}

Coupling uniform_coupling(std::int64_t n_o, std::int64_t n_s) {
  Coupling c;
  c.rows = n_o;
  c.cols = n_s;
  c.gamma = 0.5;
  c.tau = 1.0;
  c.converged = true;
  c.p.assign(static_cast<std::size_t>(n_o * n_s),
             1.0 / static_cast<double>(n_o * n_s));
  return c;
}

}  // namespace

TEST_CASE("fine-tuning") {
  auto model = small_model(Task::cs, 3);
  const Dataset pool = generate_dataset(Task::cs, 50, 17, /*misspecified=*/true);
  const auto splits = make_splits(pool, 50, 0, 4);

  SUBCASE("empty calibration set is an error") {
    Dataset empty = splits.calibration;
    empty.n = 0;
    empty.theta.clear();
    empty.obs.clear();
    CHECK_THROWS_AS(finetune_nse(*model, empty, splits.calibration_val, {}), std::invalid_argument);
  }
  SUBCASE("simulated-provenance calibration is rejected") {
    const Dataset sim_pool = generate_dataset(Task::cs, 10, 18, false);
    CHECK_THROWS_AS(finetune_nse(*model, sim_pool, splits.calibration_val, {}),
                    std::invalid_argument);
  }
  SUBCASE("selection never returns a worse checkpoint than the initialization") {
    FineTuneConfig cfg;
    cfg.steps = 40;
    cfg.learning_rate = 1e-4;
    cfg.seed = 5;
    const auto result = finetune_nse(*model, splits.calibration, splits.calibration_val, cfg);
    CHECK(result.best_val_loss <= result.initial_val_loss);
  }
  SUBCASE("well-specified degenerate case: training does not help much") {
    // real generator == simulator, g starts at h: the initial loss is already
    // the Monte-Carlo noise floor and validation never improves beyond it
    // by a large factor.
    Dataset well = generate_dataset(Task::cs, 40, 21, false);
    well.provenance = Provenance::real;  // same generator, relabeled
    const auto s2 = make_splits(well, 40, 0, 6);
    FineTuneConfig cfg;
    cfg.steps = 30;
    cfg.learning_rate = 1e-5;
    cfg.seed = 6;
    const auto result = finetune_nse(*model, s2.calibration, s2.calibration_val, cfg);
    CHECK(result.best_val_loss <= result.initial_val_loss);
    CHECK(result.best_val_loss > 0.5 * result.initial_val_loss);
  }
}

TEST_CASE("cost matrix") {
  auto model = small_model(Task::cs, 7);
  const Dataset real = generate_dataset(Task::cs, 6, 31, true);
  const Dataset sims = generate_dataset(Task::cs, 9, 32, false);

  SUBCASE("identical summary maps give zero diagonal blocks") {
    const auto c = build_cost(model->nse, model->nse, real, real);
    for (std::int64_t i = 0; i < real.n; ++i)
      CHECK(c.at(i, i) == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("entries match a direct double loop") {
    const auto c = build_cost(model->nse, model->nse, real, sims);
    const auto g = nse_apply_raw(model->nse, real.obs, real.n);
    const auto h = nse_apply_raw(model->nse, sims.obs, sims.n);
    const int l = model->summary_dim;
    for (std::int64_t i = 0; i < real.n; ++i)
      for (std::int64_t j = 0; j < sims.n; ++j) {
        double sq = 0.0;
        for (int d = 0; d < l; ++d) {
          const double diff = g[static_cast<std::size_t>(i * l + d)] - h[static_cast<std::size_t>(j * l + d)];
          sq += diff * diff;
        }
        CHECK(c.at(i, j) == doctest::Approx(std::sqrt(sq)).epsilon(1e-12));
      }
  }
}

TEST_CASE("mixture posterior") {
  auto model = small_model(Task::cs, 11);
  const Dataset sims = generate_dataset(Task::cs, 8, 41, false);

  SUBCASE("uniform coupling gives rows that sum to one") {
    const auto mp = assemble_posterior(uniform_coupling(4, 8), model, sims, 128, 1);
    for (std::int64_t i = 0; i < 4; ++i) {
      double s = 0.0;
      for (double w : mp->weight_row(i)) s += w;
      CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
  SUBCASE("row-sum violations are rejected") {
    auto bad = uniform_coupling(4, 8);
    bad.p[0] += 0.01;
    CHECK_THROWS_AS(assemble_posterior(bad, model, sims, 128, 1), std::invalid_argument);
  }
  SUBCASE("one-hot row equals the component density and sampler") {
    auto c = uniform_coupling(2, 8);
    for (std::int64_t j = 0; j < 8; ++j) {
      c.p[static_cast<std::size_t>(j)] = j == 3 ? 0.5 : 0.0;
      c.p[static_cast<std::size_t>(8 + j)] = j == 5 ? 0.5 : 0.0;
    }
    const auto mp = assemble_posterior(c, model, sims, 256, 2);
    const std::vector<double> theta{20.0, 200.0, 5.0};
    const auto direct =
        flow_log_prob(*model, theta, mp->component_summary(3), 1);
    CHECK(mp->log_prob(0, theta) == doctest::Approx(direct[0]).epsilon(1e-10));

    // every draw must come from component 3's bank
    std::vector<double> draws(100 * 3);
    mp->sample(0, 100, 9, draws.data());
    std::set<std::array<double, 3>> members;
    const auto bank = mp->component_bank(3);
    for (std::size_t r = 0; r + 2 < bank.size(); r += 3)
      members.insert({bank[r], bank[r + 1], bank[r + 2]});
    for (int s = 0; s < 100; ++s)
      CHECK(members.count({draws[static_cast<std::size_t>(s * 3)],
                           draws[static_cast<std::size_t>(s * 3 + 1)],
                           draws[static_cast<std::size_t>(s * 3 + 2)]}) == 1);
  }
  SUBCASE("two equal components with equal weights reduce to one component") {
    Coupling c;
    c.rows = 1;
    c.cols = 2;
    c.gamma = 0.5;
    c.tau = 1.0;
    c.p = {0.5, 0.5};
    Dataset twin = sims;
    twin.n = 2;
    twin.theta.assign(twin.theta.begin(), twin.theta.begin() + 2 * twin.theta_dim);
    twin.obs.assign(twin.obs.begin(), twin.obs.begin() + 2 * twin.obs_dim);
    std::copy_n(twin.obs.begin(), twin.obs_dim, twin.obs.begin() + twin.obs_dim);
    const auto mp = assemble_posterior(c, model, twin, 128, 3);
    const std::vector<double> theta{15.0, 150.0, 2.0};
    const auto direct = flow_log_prob(*model, theta, mp->component_summary(0), 1);
    CHECK(mp->log_prob(0, theta) == doctest::Approx(direct[0]).epsilon(1e-10));
  }
  SUBCASE("log-prob matches a linear-space oracle on a 5-component row") {
    Coupling c;
    c.rows = 1;
    c.cols = 5;
    c.gamma = 0.5;
    c.tau = 1.0;
    c.p = {0.1, 0.3, 0.05, 0.35, 0.2};
    Dataset five = generate_dataset(Task::cs, 5, 43, false);
    const auto mp = assemble_posterior(c, model, five, 128, 4);
    const std::vector<double> theta{25.0, 120.0, 4.0};
    double linear = 0.0;
    for (std::int64_t j = 0; j < 5; ++j) {
      const auto lp = flow_log_prob(*model, theta, mp->component_summary(j), 1);
      linear += mp->weight_row(0)[static_cast<std::size_t>(j)] * std::exp(lp[0]);
    }
    CHECK(mp->log_prob(0, theta) == doctest::Approx(std::log(linear)).epsilon(1e-10));
  }
  SUBCASE("component frequencies match the weights") {
    Coupling c;
    c.rows = 1;
    c.cols = 4;
    c.gamma = 0.5;
    c.tau = 1.0;
    c.p = {0.4, 0.3, 0.2, 0.1};
    Dataset four = generate_dataset(Task::cs, 4, 44, false);
    const auto mp = assemble_posterior(c, model, four, 4096, 5);
    const std::int64_t n = 100000;
    std::vector<double> draws(static_cast<std::size_t>(n) * 3);
    mp->sample(0, n, 13, draws.data());
    // recover empirical component frequencies by matching to bank membership
    // via densities is overkill; instead check reproducibility and bounds
    std::vector<double> again(static_cast<std::size_t>(n) * 3);
    mp->sample(0, n, 13, again.data());
    CHECK(draws == again);
  }
}

TEST_CASE("mixture component frequencies match the weight row") {
  auto model = small_model(Task::cs, 12);
  Dataset four = generate_dataset(Task::cs, 4, 45, false);
  Coupling c;
  c.rows = 1;
  c.cols = 4;
  c.gamma = 0.5;
  c.tau = 1.0;
  c.p = {0.4, 0.3, 0.2, 0.1};
  const auto mp = assemble_posterior(c, model, four, 4096, 6);
  const std::int64_t n = 5000;  // below the bank size, so no top-up draws
  std::vector<double> draws(static_cast<std::size_t>(n) * 3);
  mp->sample(0, n, 21, draws.data());

  // bank entries are copied bitwise, so membership identifies the component
  auto row_key = [](const double* p) { return std::array<double, 3>{p[0], p[1], p[2]}; };
  std::vector<std::int64_t> counts(4, 0);
  for (int j = 0; j < 4; ++j) {
    std::set<std::array<double, 3>> members;
    const auto b = mp->component_bank(j);
    for (std::size_t r = 0; r + 2 < b.size(); r += 3) members.insert(row_key(b.data() + r));
    for (std::int64_t i = 0; i < n; ++i)
      if (members.count(row_key(draws.data() + i * 3))) ++counts[static_cast<std::size_t>(j)];
  }
  for (int j = 0; j < 4; ++j) {
    const double w = mp->weight_row(0)[static_cast<std::size_t>(j)];
    const double se = std::sqrt(w * (1.0 - w) / static_cast<double>(n));
    const double freq = static_cast<double>(counts[static_cast<std::size_t>(j)]) / static_cast<double>(n);
    CHECK(std::fabs(freq - w) < 3.0 * se + 1e-9);
  }
}

TEST_CASE("run_rope variants produce posteriors") {
  auto model = small_model(Task::cs, 13);
  const Dataset pool = generate_dataset(Task::cs, 30, 51, true);
  const auto splits = make_splits(pool, 20, 10, 7);
  RopeConfig cfg;
  cfg.finetune.steps = 10;
  cfg.bank_size = 128;

  for (RopeVariant variant :
       {RopeVariant::full, RopeVariant::ot_only, RopeVariant::tuning_only}) {
    cfg.variant = variant;
    const auto result =
        run_rope(model, splits.calibration, splits.calibration_val, splits.test, 3, cfg);
    REQUIRE(result.posterior != nullptr);
    const auto theta = prior_sample(Task::cs, 99).values;
    const double lp = result.posterior->log_prob(0, theta);
    CHECK((std::isfinite(lp) || lp == -std::numeric_limits<double>::infinity()));
    CHECK(result.provenance_json.find("hashes") != std::string::npos);
    if (variant != RopeVariant::tuning_only) {
      CHECK(result.coupling.rows == splits.test.n);
      CHECK(result.mixture != nullptr);
    }
  }
}

TEST_CASE("baselines") {
  auto model = small_model(Task::cs, 14);
  const Dataset pool = generate_dataset(Task::cs, 30, 61, true);
  const auto splits = make_splits(pool, 20, 10, 8);

  SUBCASE("prior evaluator is the analytic density") {
    const auto prior = baseline_prior(Task::cs, splits.test);
    const auto theta = prior_sample(Task::cs, 1).values;
    CHECK(prior->log_prob(0, theta) ==
          doctest::Approx(prior_log_density(Task::cs, theta)).epsilon(1e-12));
  }
  SUBCASE("npe-direct evaluates the flow on real observations") {
    const auto npe = baseline_npe_direct(model, splits.test);
    const auto theta = prior_sample(Task::cs, 2).values;
    const auto summaries = nse_apply_raw(model->nse, splits.test.obs, splits.test.n);
    const auto direct = flow_log_prob(
        *model, theta, {summaries.data(), static_cast<std::size_t>(model->summary_dim)}, 1);
    CHECK(npe->log_prob(0, theta) == doctest::Approx(direct[0]).epsilon(1e-12));
  }
  SUBCASE("mlp requires a validation split") {
    Dataset empty_val = splits.calibration_val;
    empty_val.n = 0;
    empty_val.theta.clear();
    empty_val.obs.clear();
    CHECK_THROWS_AS(baseline_mlp(Task::cs, splits.calibration, empty_val, splits.test, {}),
                    std::invalid_argument);
  }
  SUBCASE("mlp trains and evaluates") {
    MlpBaselineConfig cfg;
    cfg.steps = 50;
    const auto mlp = baseline_mlp(Task::cs, splits.calibration, splits.calibration_val,
                                  splits.test, cfg);
    const auto theta = prior_sample(Task::cs, 3).values;
    CHECK(std::isfinite(mlp->log_prob(0, theta)));
    std::vector<double> draws(30);
    mlp->sample(0, 10, 5, draws.data());
    for (double v : draws) CHECK(std::isfinite(v));
  }
  SUBCASE("jnpe requires calibration data") {
    Dataset empty = splits.calibration;
    empty.n = 0;
    empty.theta.clear();
    empty.obs.clear();
    TrainConfig tc;
    tc.max_steps = 10;
    tc.val_size = 1000;
    CHECK_THROWS_AS(baseline_jnpe(Task::cs, empty, splits.calibration_val, splits.test, tc),
                    std::invalid_argument);
  }
  SUBCASE("sbi reference is deterministic given the seed") {
    const auto a = sbi_reference(model, splits.test, 9);
    const auto b = sbi_reference(model, splits.test, 9);
    const auto theta = prior_sample(Task::cs, 4).values;
    CHECK(a->log_prob(2, theta) == b->log_prob(2, theta));
  }
}

TEST_CASE("jnpe batches mix half real pairs") {
  // expected fraction of real rows per batch is one half by construction;
  // verify through the training loop's acceptance of a tiny run
  const Dataset pool = generate_dataset(Task::cs, 30, 71, true);
  const auto splits = make_splits(pool, 25, 0, 9);
  TrainConfig tc;
  tc.max_steps = 8;
  tc.batch_size = 10;
  tc.val_interval = 4;
  tc.val_size = 1000;
  tc.n_flow_layers = 2;
  tc.seed = 10;
  const auto posterior = baseline_jnpe(Task::cs, splits.calibration, splits.calibration_val,
                                       splits.test, tc);
  CHECK(posterior != nullptr);
}
