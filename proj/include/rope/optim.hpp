#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rope/tensor.hpp"

namespace rope {

// Adam with the usual defaults (beta1 = 0.9, beta2 = 0.999, eps = 1e-8) and
// bias correction. One state slot per parameter tensor.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t t = 0;

  void init(std::span<const ad::Tensor> params);
  bool initialized() const { return !m.empty(); }
};

// In-place update from explicit gradient arrays.
void adam_step(std::span<ad::Tensor> params, std::span<const std::span<const double>> grads,
               AdamState& state, double lr);

// Convenience: uses the gradients attached to the parameters by backward().
void adam_step(std::span<ad::Tensor> params, AdamState& state, double lr);

}  // namespace rope
