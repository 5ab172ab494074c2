#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "terse/tensor.hpp"

namespace testing {

inline std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

inline terse::Tensor random_tensor(terse::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  const auto n = terse::shape_numel(shape);
  return terse::Tensor(std::move(shape), random_vec(n, rng, scale), true);
}

inline double rel_err(double a, double b) {
  const double diff = std::abs(a - b);
  if (diff < 1e-9) return 0.0;
  return diff / std::max(std::abs(a), std::abs(b));
}

// Worst relative error between backward() gradients and central differences
// for every element of every input.
inline double grad_check(const std::function<terse::Tensor(terse::Graph&)>& f, std::vector<terse::Tensor> inputs,
                         double h = 1e-6) {
  for (auto& t : inputs) t.zero_grad();
  {
    terse::Graph g;
    g.backward(f(g));
  }
  double worst = 0.0;
  for (auto& t : inputs) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      t.mutable_data()[i] = orig + h;
      terse::Graph gp(terse::GraphMode::frozen);
      const double fp = f(gp).item();
      t.mutable_data()[i] = orig - h;
      terse::Graph gm(terse::GraphMode::frozen);
      const double fm = f(gm).item();
      t.mutable_data()[i] = orig;
      const double numeric = (fp - fm) / (2 * h);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      worst = std::max(worst, rel_err(a, numeric));
    }
  }
  return worst;
}

}  // namespace testing
