#pragma once

// Temperature / nucleus sampling of reasoning traces from a Transformer.

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "terse/model.hpp"
#include "terse/task.hpp"

namespace terse::model {

struct SamplerConfig {
  double temperature = 0.6;
  double top_p = 0.95;
  int max_new_tokens = 160;
  std::uint64_t seed = 0;
  // Argmax decoding (the temperature -> 0 limit).
  bool greedy = false;

  void validate() const;
};

nlohmann::json to_json(const SamplerConfig& c);
SamplerConfig sampler_config_from_json(const nlohmann::json& j);

// Draw one token id. Top-p keeps the smallest prefix of the
// probability-sorted vocabulary (ties by id) whose mass reaches top_p and
// renormalises it.
int sample_token(std::span<const double> logits, const SamplerConfig& cfg, std::mt19937_64& rng);

struct SampleOptions {
  std::vector<ResidualHook> hooks;
  // Record h^l at the final reasoning token for every layer.
  bool capture_final_residuals = false;
  // Record log pi(token) under the untempered model for each generated token.
  bool record_log_probs = false;
};

struct Rollout {
  task::TraceRecord record;
  std::vector<ResidualSnapshot> final_snapshots;
  std::vector<double> log_probs;  // one per response token
};

Rollout sample(const Transformer& model, const task::Problem& problem, const SamplerConfig& cfg,
               const SampleOptions& opts = {});

struct PassAtOne {
  std::vector<double> per_prompt;
  double mean = 0.0;
};

// Groups are rollouts of one prompt; p = (1/k) * #correct per group.
PassAtOne pass_at_1(const std::vector<std::vector<task::TraceRecord>>& groups);

}  // namespace terse::model
