#include "terse/optim.hpp"

#include <cmath>
#include <string>

namespace terse {

AdamState AdamState::for_params(const std::vector<Tensor>& params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.size(), 0.0);
    s.v.emplace_back(p.size(), 0.0);
  }
  return s;
}

void adam_step(std::vector<Tensor>& params, AdamState& state, double lr, const AdamConfig& cfg) {
  if (!(lr > 0.0)) throw ContractError("adam_step: learning rate must be positive");
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ContractError("adam_step: state holds " + std::to_string(state.m.size()) +
                        " slots for " + std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (state.m[i].size() != params[i].size() || state.v[i].size() != params[i].size())
      throw ContractError("adam_step: state shape mismatch at parameter " + std::to_string(i));

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (!p.has_grad()) {
      // Moments still decay.
      for (std::size_t j = 0; j < p.size(); ++j) {
        state.m[i][j] *= cfg.beta1;
        state.v[i][j] *= cfg.beta2;
      }
    }
    auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      if (!g.empty()) {
        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      }
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

double clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto& p : params)
      for (double& g : p.mutable_grad()) g *= s;
  }
  return norm;
}

}  // namespace terse
