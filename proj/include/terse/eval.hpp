#pragma once

// Repeated sampling over a problem set with per-sample seeds derived from
// (base seed, problem index, sample index). Conditions evaluated with the
// same base seed share random streams, which keeps comparisons low-noise.

#include <functional>
#include <vector>

#include "terse/sampler.hpp"

namespace terse::eval {

struct EvalSpec {
  model::SamplerConfig sampler;
  int k = 8;  // samples per prompt
  int threads = 1;
};

// Optional per-problem hook factory (steering).
using HookFactory = std::function<std::vector<model::ResidualHook>(const task::Problem&)>;

std::vector<std::vector<task::TraceRecord>> sample_groups(const model::Transformer& model,
                                                          const std::vector<task::Problem>& problems,
                                                          const EvalSpec& spec, const HookFactory& hooks = {});

struct Summary {
  double pass1 = 0.0;
  double mean_length = 0.0;          // over all samples
  double mean_correct_length = 0.0;  // over correct samples (0 when none)
  std::size_t n = 0;
  std::size_t n_correct = 0;
};

Summary summarize(const std::vector<std::vector<task::TraceRecord>>& groups);

}  // namespace terse::eval
