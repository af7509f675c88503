#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>

#include "doctest.h"
#include "rope/flow.hpp"
#include "rope/npe.hpp"
#include "rope/rng.hpp"

using namespace rope;

namespace {

// Random small flow with non-trivial conditioner outputs.
FlowModel perturbed_flow(int k, int l, std::uint64_t seed, std::vector<double> lo = {},
                         std::vector<double> hi = {}) {
  FlowArch arch;
  arch.conditioner_hidden = {16, 16};
  arch.n_layers = 3;
  FlowModel m = make_bare_flow(k, l, seed, arch, std::move(lo), std::move(hi));
  auto rng = make_rng(seed, 99);
  for (auto p : m.parameters()) {
    auto v = p.mutable_data();
    for (auto& x : v) x += 0.1 * standard_normal(rng);
  }
  return m;
}

std::vector<double> random_summary(int l, std::uint64_t seed) {
  auto rng = make_rng(seed, 3);
  std::vector<double> s(static_cast<std::size_t>(l));
  for (auto& v : s) v = standard_normal(rng);
  return s;
}

}  // namespace

TEST_CASE("identity-initialized flow is a standard normal") {
  FlowModel m = make_bare_flow(2, 4, 1);
  const std::vector<double> theta{0.0, 0.0};
  const auto s = random_summary(4, 7);
  const auto lp = flow_log_prob(m, theta, s, 1);
  CHECK(lp[0] == doctest::Approx(-std::log(2.0 * std::numbers::pi)).epsilon(1e-12));

  const std::vector<double> theta2{1.0, -2.0};
  const auto lp2 = flow_log_prob(m, theta2, s, 1);
  CHECK(lp2[0] == doctest::Approx(-std::log(2.0 * std::numbers::pi) - 0.5 * 5.0).epsilon(1e-12));
}

TEST_CASE("round trip: inverse(forward) and forward(inverse)") {
  for (int k : {2, 3}) {
    const std::int64_t n = 64;
    auto rng = make_rng(12, 0);
    std::vector<double> summary(static_cast<std::size_t>(n * 5));
    for (auto& v : summary) v = standard_normal(rng);

    // bounded model: parameter space round trip on interior points
    FlowModel bounded = perturbed_flow(k, 5, 11, std::vector<double>(k, -1.0),
                                       std::vector<double>(k, 2.0));
    std::vector<double> theta(static_cast<std::size_t>(n * k));
    for (auto& v : theta) v = uniform_real(rng, -0.9, 1.9);
    const auto base = flow_forward(bounded, theta, summary, n);
    const auto back = flow_inverse(bounded, base, summary, n);
    double worst = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i)
      worst = std::max(worst, std::fabs(back[i] - theta[i]));
    CHECK(worst < 1e-8);

    // unbounded model: base space round trip u -> theta -> u
    FlowModel open = perturbed_flow(k, 5, 11);
    std::vector<double> u(static_cast<std::size_t>(n * k));
    for (auto& v : u) v = standard_normal(rng);
    const auto forward_of_inverse =
        flow_forward(open, flow_inverse(open, u, summary, n), summary, n);
    worst = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i)
      worst = std::max(worst, std::fabs(forward_of_inverse[i] - u[i]));
    CHECK(worst < 1e-8);
  }
}

TEST_CASE("sampling respects bounds and the seed") {
  FlowModel m = perturbed_flow(2, 3, 21, {0.0, 0.5}, {3.0, 10.0});
  const auto s = random_summary(3, 5);
  const auto a = flow_sample(m, s, 500, 77);
  const auto b = flow_sample(m, s, 500, 77);
  CHECK(a == b);
  for (std::size_t i = 0; i < a.size(); i += 2) {
    CHECK(a[i] >= 0.0);
    CHECK(a[i] <= 3.0);
    CHECK(a[i + 1] >= 0.5);
    CHECK(a[i + 1] <= 10.0);
  }
  CHECK_THROWS_AS(flow_sample(m, s, 0, 1), std::invalid_argument);
}

TEST_CASE("out-of-support density is -inf, not an error") {
  FlowModel m = perturbed_flow(2, 3, 31, {0.0, 0.0}, {1.0, 1.0});
  const auto s = random_summary(3, 9);
  std::vector<double> theta{0.5, 0.5, 1.5, 0.5, 0.2, 0.9};
  std::vector<double> tiled(9);
  for (int i = 0; i < 3; ++i) std::copy(s.begin(), s.end(), tiled.begin() + i * 3);
  const auto lps = flow_log_prob(m, theta, tiled, 3);
  CHECK(std::isfinite(lps[0]));
  CHECK(lps[1] == -std::numeric_limits<double>::infinity());
  CHECK(std::isfinite(lps[2]));
}

TEST_CASE("monte-carlo normalization over the support box") {
  // integral of exp(log_prob) over the box should be 1 within 3 SE
  FlowModel m = perturbed_flow(2, 3, 41, {0.0, 0.5}, {3.0, 10.0});
  const auto s = random_summary(3, 13);
  const std::int64_t n = 100000;
  auto rng = make_rng(14, 0);
  std::vector<double> theta(static_cast<std::size_t>(n * 2));
  std::vector<double> tiled(static_cast<std::size_t>(n * 3));
  for (std::int64_t i = 0; i < n; ++i) {
    theta[static_cast<std::size_t>(2 * i)] = uniform_real(rng, 0.0, 3.0);
    theta[static_cast<std::size_t>(2 * i + 1)] = uniform_real(rng, 0.5, 10.0);
    std::copy(s.begin(), s.end(), tiled.begin() + 3 * i);
  }
  const auto lp = flow_log_prob(m, theta, tiled, n);
  const double volume = 3.0 * 9.5;
  double mean = 0.0;
  for (double v : lp) mean += std::exp(v);
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : lp) var += (std::exp(v) - mean) * (std::exp(v) - mean);
  var /= static_cast<double>(n - 1);
  const double integral = volume * mean;
  const double se = volume * std::sqrt(var / static_cast<double>(n));
  INFO("integral = ", integral, " +/- ", se);
  CHECK(std::fabs(integral - 1.0) < 3.0 * se + 1e-3);
}

TEST_CASE("flow and statistic gradients match finite differences") {
  FlowModel m = perturbed_flow(2, 3, 51, {-1.0, -1.0}, {1.0, 1.0});
  // attach a small statistic net so the gradient flows end to end
  auto rng = make_rng(52, 0);
  std::vector<int> dims{6, 8, 3};
  m.nse.net = make_mlp(dims, rng);

  const std::int64_t n = 5;
  std::vector<double> theta(static_cast<std::size_t>(n * 2));
  std::vector<double> obs(static_cast<std::size_t>(n * 6));
  for (auto& v : theta) v = uniform_real(rng, -0.8, 0.8);
  for (auto& v : obs) v = standard_normal(rng);

  auto loss_value = [&] {
    ad::NoGradGuard no_grad;
    auto lp = flow_log_prob_tensor(m, ad::Tensor::from_data({n, 2}, theta),
                                   nse_apply(m.nse, ad::Tensor::from_data({n, 6}, obs)));
    return ad::neg(ad::mean(lp)).item();
  };

  auto params = m.parameters();
  {
    ad::Tape tape;
    auto lp = flow_log_prob_tensor(m, ad::Tensor::from_data({n, 2}, theta),
                                   nse_apply(m.nse, ad::Tensor::from_data({n, 6}, obs)));
    ad::backward(ad::neg(ad::mean(lp)));
  }
  double worst = 0.0;
  for (auto& p : params) {
    std::vector<double> analytic(p.grad().begin(), p.grad().end());
    if (analytic.empty()) continue;
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); i += std::max<std::size_t>(1, values.size() / 5)) {
      const double saved = values[i];
      const double step = 1e-5;
      values[i] = saved + step;
      const double up = loss_value();
      values[i] = saved - step;
      const double down = loss_value();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double denom = std::max(1.0, std::fabs(numeric));
      worst = std::max(worst, std::fabs(analytic[i] - numeric) / denom);
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("nse behaves like a deterministic batch map") {
  auto rng = make_rng(61, 0);
  NseParams nse;
  std::vector<int> dims{4, 8, 3};
  nse.net = make_mlp(dims, rng);
  std::vector<double> x(12);
  for (auto& v : x) v = standard_normal(rng);

  SUBCASE("zero weights give zero summaries") {
    for (auto& layer : nse.net.layers) {
      std::fill(layer.weight.mutable_data().begin(), layer.weight.mutable_data().end(), 0.0);
      std::fill(layer.bias.mutable_data().begin(), layer.bias.mutable_data().end(), 0.0);
    }
    for (double v : nse_apply_raw(nse, x, 3)) CHECK(v == 0.0);
  }
  SUBCASE("batch equals row-wise application") {
    const auto batch = nse_apply_raw(nse, x, 3);
    for (int i = 0; i < 3; ++i) {
      const auto row = nse_apply_raw(nse, {x.data() + 4 * i, 4}, 1);
      for (int j = 0; j < 3; ++j)
        CHECK(row[static_cast<std::size_t>(j)] ==
              doctest::Approx(batch[static_cast<std::size_t>(i * 3 + j)]).epsilon(1e-14));
    }
  }
  SUBCASE("dimension mismatch is an error") {
    CHECK_THROWS_AS(nse_apply_raw(nse, x, 4), std::invalid_argument);
  }
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  FlowModel m = make_flow_model(Task::sir, 71, {}, /*n_whiten=*/256);
  const auto path = std::filesystem::temp_directory_path() / "rope_test_ckpt.bin";
  save_checkpoint(m, path);
  const FlowModel back = load_checkpoint(path);
  CHECK(back.task == m.task);
  CHECK(back.theta_dim == m.theta_dim);
  CHECK(back.summary_dim == m.summary_dim);
  CHECK(back.n_layers == m.n_layers);
  CHECK(back.theta_lo == m.theta_lo);
  CHECK(back.nse.input_shift == m.nse.input_shift);
  const auto a = m.parameters();
  const auto b = back.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto av = a[i].data();
    const auto bv = b[i].data();
    CHECK(std::equal(av.begin(), av.end(), bv.begin()));
  }
  std::filesystem::remove(path);

  // behavioral check: identical densities
  auto rng = make_rng(72, 0);
  std::vector<double> theta{0.2, 0.1};
  std::vector<double> obs(6);
  for (auto& v : obs) v = uniform_real(rng, 0.0, 10.0);
  const auto s1 = nse_apply_raw(m.nse, obs, 1);
  const auto s2 = nse_apply_raw(back.nse, obs, 1);
  CHECK(s1 == s2);
}

TEST_CASE("training smoke on a tiny budget") {
  TrainConfig cfg;
  cfg.max_steps = 120;
  cfg.val_interval = 40;
  cfg.val_size = 1000;
  cfg.batch_size = 50;
  cfg.seed = 5;
  TrainReport report;
  const FlowModel model = train_npe(Task::cs, cfg, &report);
  REQUIRE(report.batch_loss.size() == 120);

  // sanity descent over the first 100 steps (windowed, batches are noisy)
  double early = 0.0, late = 0.0;
  for (int i = 0; i < 20; ++i) early += report.batch_loss[static_cast<std::size_t>(i)];
  for (int i = 80; i < 100; ++i) late += report.batch_loss[static_cast<std::size_t>(i)];
  CHECK(late < early);

  // returned model carries the best recorded validation score
  double best = -1e300;
  for (const auto& [step, v] : report.val_log_prob) best = std::max(best, v);
  CHECK(report.best_val_log_prob == best);

  // and the restored checkpoint reproduces it
  const Dataset val = generate_dataset(Task::cs, 1000, mix_seed(5, 31), false);
  double total = 0.0;
  const auto summaries = nse_apply_raw(model.nse, val.obs, val.n);
  const auto lp = flow_log_prob(model, val.theta, summaries, val.n);
  for (double v : lp) total += v;
  CHECK(total / static_cast<double>(val.n) == doctest::Approx(report.best_val_log_prob).epsilon(1e-10));
}

TEST_CASE("posterior_predictive_check input guards") {
  FlowModel m = make_flow_model(Task::cs, 81, {}, 64);
  CHECK_THROWS_AS(posterior_predictive_check(m, 0, 100, 1), std::invalid_argument);
}
