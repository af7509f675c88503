#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "rope/optim.hpp"
#include "rope/rng.hpp"
#include "rope/tensor.hpp"

using namespace rope;
using ad::Tensor;

namespace {

// Central finite differences of a scalar-valued graph with respect to one
// leaf; the oracle against which every backward rule is checked.
std::vector<double> finite_diff(Tensor& leaf,
                                const std::function<double()>& eval_loss,
                                double step = 1e-5) {
  std::vector<double> grad(leaf.data().size());
  auto values = leaf.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + step;
    const double up = eval_loss();
    values[i] = saved - step;
    const double down = eval_loss();
    values[i] = saved;
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

double max_rel_err(std::span<const double> got, std::span<const double> want) {
  double worst = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double denom = std::max(1.0, std::fabs(want[i]));
    worst = std::max(worst, std::fabs(got[i] - want[i]) / denom);
  }
  return worst;
}

Tensor random_leaf(ad::Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::vector<double> v(static_cast<std::size_t>(ad::shape_size(shape)));
  for (auto& x : v) x = uniform_real(rng, lo, hi);
  return Tensor::from_data(std::move(shape), std::move(v), /*requires_grad=*/true);
}

void check_gradient(const char* name, Tensor& leaf,
                    const std::function<Tensor()>& build_loss, double tol = 1e-4) {
  leaf.zero_grad();  // earlier checks may have accumulated into this leaf
  {
    ad::Tape tape;
    ad::backward(build_loss());
  }
  std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
  leaf.zero_grad();
  const auto numeric = finite_diff(leaf, [&] {
    ad::NoGradGuard no_grad;
    return build_loss().item();
  });
  INFO(name);
  CHECK(max_rel_err(analytic, numeric) < tol);
}

}  // namespace

TEST_CASE("forward op examples") {
  auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  auto v = Tensor::from_data({2, 1}, {2, 3});
  auto prod = ad::matmul(eye, v);
  CHECK(prod.data()[0] == doctest::Approx(2.0));
  CHECK(prod.data()[1] == doctest::Approx(3.0));

  auto r = ad::relu(Tensor::from_data({3}, {-1, 0, 2}));
  CHECK(r.data()[0] == 0.0);
  CHECK(r.data()[1] == 0.0);
  CHECK(r.data()[2] == 2.0);

  auto lse = ad::logsumexp(Tensor::from_data({2}, {0, 0}));
  CHECK(lse.item() == doctest::Approx(0.6931471805599453).epsilon(1e-12));
}

TEST_CASE("shape and domain errors carry context") {
  auto a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  CHECK_THROWS_WITH_AS(ad::matmul(a, b), doctest::Contains("matmul"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(ad::add(a, b), doctest::Contains("add"), std::invalid_argument);
  CHECK_THROWS_AS(ad::log_op(Tensor::from_data({1}, {-1.0})), std::domain_error);
  CHECK_THROWS_AS(ad::log_op(Tensor::from_data({1}, {0.0})), std::domain_error);
  CHECK_THROWS_AS(ad::exp_op(Tensor::from_data({1}, {1e6})), std::domain_error);
}

TEST_CASE("backward examples") {
  SUBCASE("sum of squares") {
    auto x = Tensor::from_data({3}, {1, 2, 3}, true);
    ad::Tape tape;
    auto loss = ad::sum(ad::mul(x, x));
    ad::backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
    CHECK(x.grad()[2] == doctest::Approx(6.0));
  }
  SUBCASE("log at e") {
    auto x = Tensor::from_data({1}, {std::exp(1.0)}, true);
    ad::Tape tape;
    auto loss = ad::sum(ad::log_op(x));
    ad::backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
  }
  SUBCASE("loss must be scalar and on the tape") {
    auto x = Tensor::from_data({2}, {1, 2}, true);
    ad::Tape tape;
    auto y = ad::mul(x, x);
    CHECK_THROWS_AS(ad::backward(y), std::invalid_argument);
    CHECK_THROWS_AS(ad::backward(x), std::invalid_argument);  // leaf, never recorded
  }
}

TEST_CASE("gradients match central finite differences") {
  auto rng = make_rng(7, 0);

  SUBCASE("elementwise unary chain") {
    auto x = random_leaf({3, 4}, rng, 0.1, 2.0);
    check_gradient("tanh/exp/log/square/abs", x, [&] {
      auto t = ad::tanh_op(x);
      auto e = ad::exp_op(t);
      auto lg = ad::log_op(ad::add_const(ad::square(x), 0.5));
      return ad::sum(ad::add(ad::abs_op(ad::sub(e, lg)), ad::mul(t, t)));
    });
  }

  SUBCASE("relu away from the kink") {
    auto x = random_leaf({20}, rng);
    // nudge values off zero so the subgradient choice cannot bite
    for (auto& v : x.mutable_data())
      if (std::fabs(v) < 1e-3) v += 0.01;
    check_gradient("relu", x, [&] { return ad::sum(ad::relu(x)); });
  }

  SUBCASE("matmul both sides") {
    auto a = random_leaf({3, 5}, rng);
    auto b = random_leaf({5, 2}, rng);
    check_gradient("matmul lhs", a, [&] { return ad::sum(ad::square(ad::matmul(a, b))); });
    check_gradient("matmul rhs", b, [&] { return ad::sum(ad::square(ad::matmul(a, b))); });
  }

  SUBCASE("broadcast bias add and row broadcast") {
    auto x = random_leaf({4, 3}, rng);
    auto bias = random_leaf({3}, rng);
    check_gradient("bias", bias, [&] { return ad::sum(ad::square(ad::add(x, bias))); });
    check_gradient("bcast", bias,
                   [&] { return ad::sum(ad::square(ad::broadcast_rows(bias, 5))); });
    check_gradient("mul bcast", bias, [&] { return ad::sum(ad::mul(x, bias)); });
  }

  SUBCASE("reductions, slicing, concat, logsumexp") {
    auto x = random_leaf({4, 6}, rng);
    check_gradient("mean", x, [&] { return ad::mean(ad::square(x)); });
    check_gradient("sum_cols", x, [&] { return ad::sum(ad::square(ad::sum_cols(x))); });
    check_gradient("slice", x, [&] { return ad::sum(ad::square(ad::slice_cols(x, 1, 4))); });
    check_gradient("concat", x, [&] {
      auto left = ad::slice_cols(x, 0, 2);
      auto right = ad::slice_cols(x, 2, 6);
      std::vector<Tensor> parts{right, left};
      return ad::sum(ad::square(ad::concat_cols(parts)));
    });
    check_gradient("logsumexp", x, [&] { return ad::logsumexp(x); });
    check_gradient("logsumexp_cols", x,
                   [&] { return ad::sum(ad::square(ad::logsumexp_cols(x))); });
  }

  SUBCASE("composite mlp loss") {
    auto w1 = random_leaf({6, 8}, rng);
    auto b1 = random_leaf({8}, rng);
    auto w2 = random_leaf({8, 2}, rng);
    auto x = random_leaf({5, 6}, rng);
    auto loss_fn = [&] {
      auto h = ad::relu(ad::add(ad::matmul(x, w1), b1));
      auto out = ad::matmul(h, w2);
      return ad::mean(ad::square(out));
    };
    check_gradient("mlp w1", w1, loss_fn);
    check_gradient("mlp b1", b1, loss_fn);
    check_gradient("mlp w2", w2, loss_fn);
  }
}

TEST_CASE("logsumexp is overflow-safe and exact") {
  auto big = Tensor::from_data({3}, {1e6, 1e6 - 1.0, 2.0});
  const double got = ad::logsumexp(big).item();
  CHECK(std::isfinite(got));
  // max(x) + log sum exp(x - max)
  const double want = 1e6 + std::log(1.0 + std::exp(-1.0) + std::exp(2.0 - 1e6));
  CHECK(got == doctest::Approx(want).epsilon(1e-14));
}

TEST_CASE("replay determinism") {
  auto run = [] {
    auto rng = make_rng(123, 0);
    auto w = random_leaf({8, 8}, rng);
    auto x = random_leaf({4, 8}, rng);
    ad::Tape tape;
    auto loss = ad::mean(ad::square(ad::tanh_op(ad::matmul(x, w))));
    ad::backward(loss);
    std::vector<double> out(w.grad().begin(), w.grad().end());
    out.push_back(loss.item());
    return out;
  };
  const auto a = run();
  const auto b = run();
  CHECK(a == b);  // bitwise
}

TEST_CASE("tape clear releases recorded nodes") {
  ad::Tape tape;
  auto x = Tensor::from_data({2}, {1, 2}, true);
  auto y = ad::sum(ad::square(x));
  (void)y;
  CHECK(tape.size() == 2);
  tape.clear();
  CHECK(tape.size() == 0);
}

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    auto p = Tensor::from_data({3}, {1, 2, 3}, true);
    std::vector<Tensor> params{p};
    std::vector<double> zero(3, 0.0);
    std::vector<std::span<const double>> grads{zero};
    AdamState state;
    adam_step(params, grads, state, 0.1);
    CHECK(p.data()[0] == 1.0);
    CHECK(p.data()[1] == 2.0);
    CHECK(p.data()[2] == 3.0);
  }
  SUBCASE("first step magnitude is about lr") {
    auto p = Tensor::from_data({1}, {0.0}, true);
    std::vector<Tensor> params{p};
    std::vector<double> g{0.37};
    std::vector<std::span<const double>> grads{g};
    AdamState state;
    adam_step(params, grads, state, 1e-2);
    // bias-corrected first step: lr * g / (|g| + eps')
    CHECK(std::fabs(p.data()[0] + 1e-2) < 1e-5);
  }
  SUBCASE("constant gradient walks opposite the gradient sign") {
    auto p = Tensor::from_data({1}, {0.0}, true);
    std::vector<Tensor> params{p};
    std::vector<double> g{-1.5};
    std::vector<std::span<const double>> grads{g};
    AdamState state;
    for (int i = 0; i < 200; ++i) adam_step(params, grads, state, 1e-3);
    CHECK(p.data()[0] > 0.1);
  }
  SUBCASE("state mismatch is an error") {
    auto p = Tensor::from_data({1}, {0.0}, true);
    auto q = Tensor::from_data({1}, {0.0}, true);
    std::vector<Tensor> both{p, q};
    AdamState state;
    state.init(std::span<const Tensor>(both.data(), 1));
    std::vector<double> g{1.0};
    std::vector<std::span<const double>> grads{g, g};
    CHECK_THROWS_AS(adam_step(both, grads, state, 1e-3), std::invalid_argument);
  }
}
