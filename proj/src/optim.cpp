#include "rope/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace rope {

namespace {
constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kEps = 1e-8;
}  // namespace

void AdamState::init(std::span<const ad::Tensor> params) {
  m.clear();
  v.clear();
  for (const auto& p : params) {
    m.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
    v.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
  }
  t = 0;
}

void adam_step(std::span<ad::Tensor> params, std::span<const std::span<const double>> grads,
               AdamState& state, double lr) {
  if (!(lr > 0.0)) throw std::invalid_argument("adam_step: learning rate must be positive");
  if (!state.initialized()) state.init(params);
  if (state.m.size() != params.size() || grads.size() != params.size())
    throw std::invalid_argument("adam_step: parameter/gradient/state count mismatch");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto value = params[k].mutable_data();
    const auto g = grads[k];
    if (g.size() != value.size() || state.m[k].size() != value.size())
      throw std::invalid_argument("adam_step: size mismatch in parameter " + std::to_string(k));
    auto& mk = state.m[k];
    auto& vk = state.v[k];
    for (std::size_t i = 0; i < value.size(); ++i) {
      mk[i] = kBeta1 * mk[i] + (1.0 - kBeta1) * g[i];
      vk[i] = kBeta2 * vk[i] + (1.0 - kBeta2) * g[i] * g[i];
      const double mhat = mk[i] / bc1;
      const double vhat = vk[i] / bc2;
      value[i] -= lr * mhat / (std::sqrt(vhat) + kEps);
    }
  }
}

void adam_step(std::span<ad::Tensor> params, AdamState& state, double lr) {
  std::vector<std::span<const double>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) {
    if (p.grad().empty())
      throw std::invalid_argument("adam_step: parameter has no gradient attached");
    grads.push_back(p.grad());
  }
  adam_step(params, grads, state, lr);
}

}  // namespace rope
