#include "terse/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace terse::model {

void SamplerConfig::validate() const {
  if (!greedy && !(temperature > 0.0)) throw ContractError("sampler: temperature must be > 0");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ContractError("sampler: top_p must lie in (0,1]");
  if (max_new_tokens <= 0) throw ContractError("sampler: max_new_tokens must be positive");
}

nlohmann::json to_json(const SamplerConfig& c) {
  return {{"temperature", c.temperature},
          {"top_p", c.top_p},
          {"max_new_tokens", c.max_new_tokens},
          {"seed", c.seed},
          {"greedy", c.greedy}};
}

SamplerConfig sampler_config_from_json(const nlohmann::json& j) {
  SamplerConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "temperature") c.temperature = value.get<double>();
    else if (key == "top_p") c.top_p = value.get<double>();
    else if (key == "max_new_tokens") c.max_new_tokens = value.get<int>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "greedy") c.greedy = value.get<bool>();
    else throw ContractError("sampler config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

int sample_token(std::span<const double> logits, const SamplerConfig& cfg, std::mt19937_64& rng) {
  const std::size_t V = logits.size();
  if (cfg.greedy)
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());

  std::vector<double> probs(V);
  for (std::size_t j = 0; j < V; ++j) probs[j] = logits[j] / cfg.temperature;
  rowops::softmax_row(probs.data(), probs.data(), V);

  std::vector<int> order(V);
  std::iota(order.begin(), order.end(), 0);
  std::size_t keep = V;
  if (cfg.top_p < 1.0) {
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)]; });
    double cum = 0.0;
    for (std::size_t i = 0; i < V; ++i) {
      cum += probs[static_cast<std::size_t>(order[i])];
      if (cum >= cfg.top_p) {
        keep = i + 1;
        break;
      }
    }
  }
  double mass = 0.0;
  for (std::size_t i = 0; i < keep; ++i) mass += probs[static_cast<std::size_t>(order[i])];
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng) * mass;
  double cum = 0.0;
  for (std::size_t i = 0; i < keep; ++i) {
    cum += probs[static_cast<std::size_t>(order[i])];
    if (u < cum) return order[i];
  }
  return order[keep - 1];
}

Rollout sample(const Transformer& model, const task::Problem& problem, const SamplerConfig& cfg,
               const SampleOptions& opts) {
  cfg.validate();
  const auto prompt = problem.prompt_tokens();
  DecodeState state(model, opts.hooks, opts.capture_final_residuals);
  if (prompt.size() >= state.capacity())
    throw ContractError("sample: prompt of " + std::to_string(prompt.size()) +
                        " tokens leaves no room in the context");

  std::mt19937_64 rng(cfg.seed);
  std::span<const double> logits;
  for (int tok : prompt) logits = state.step(tok);

  Rollout out;
  std::vector<int> response;
  bool complete = false;
  while (response.size() < static_cast<std::size_t>(cfg.max_new_tokens)) {
    const int tok = sample_token(logits, cfg, rng);
    if (opts.record_log_probs)
      out.log_probs.push_back(logits[static_cast<std::size_t>(tok)] -
                              rowops::log_sum_exp(logits.data(), logits.size()));
    response.push_back(tok);
    if (tok == task::kEos) {
      complete = true;
      break;
    }
    if (state.length() >= state.capacity()) break;  // truncated
    logits = state.step(tok);
  }

  out.record = task::record_from_response(problem, std::move(response), complete);
  if (opts.capture_final_residuals) {
    const std::size_t pos = out.record.final_reasoning_position;
    if (pos < state.length()) {
      for (int l = 0; l <= model.config().n_layers; ++l) {
        auto row = state.residual(l, pos);
        out.final_snapshots.push_back({l, pos, std::vector<double>(row.begin(), row.end())});
      }
    }
  }
  return out;
}

PassAtOne pass_at_1(const std::vector<std::vector<task::TraceRecord>>& groups) {
  if (groups.empty()) throw ContractError("pass_at_1: no groups");
  PassAtOne out;
  for (const auto& g : groups) {
    if (g.empty()) throw ContractError("pass_at_1: empty group");
    const auto correct = std::count_if(g.begin(), g.end(), [](const auto& r) { return r.correct; });
    out.per_prompt.push_back(static_cast<double>(correct) / static_cast<double>(g.size()));
  }
  out.mean = std::accumulate(out.per_prompt.begin(), out.per_prompt.end(), 0.0) /
             static_cast<double>(out.per_prompt.size());
  return out;
}

}  // namespace terse::model
