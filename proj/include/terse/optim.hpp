#pragma once

#include <cstdint>
#include <vector>

#include "terse/tensor.hpp"

namespace terse {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment buffers for one parameter list, plus the step count.
struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  static AdamState for_params(const std::vector<Tensor>& params);
};

// One bias-corrected Adam update using each parameter's current gradient.
// Parameters without a gradient are treated as having a zero gradient.
void adam_step(std::vector<Tensor>& params, AdamState& state, double lr,
               const AdamConfig& cfg = {});

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(std::vector<Tensor>& params, double max_norm);

}  // namespace terse
