#pragma once

// Difference-in-means efficiency direction and the single-position
// residual intervention h' = h + lambda * v at the last prompt token.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "terse/eval.hpp"
#include "terse/model.hpp"
#include "terse/task.hpp"

namespace terse::steer {

enum class Scope { global, per_prompt };

struct SelectionRule {
  // global: the k shortest and k longest correct traces overall (length,
  // then id ascending on ties). per_prompt: for up to k prompts with at
  // least two correct traces of different length, the shortest and the
  // longest trace of each prompt.
  std::size_t k_per_side = 200;
  Scope scope = Scope::global;
};

nlohmann::json to_json(const SelectionRule& r);

class InsufficientTraces : public std::runtime_error {
 public:
  InsufficientTraces(const std::string& what, std::size_t achieved, std::size_t required)
      : std::runtime_error(what), achieved(achieved), required(required) {}
  std::size_t achieved, required;
};

struct ContrastiveSets {
  // Indexed [layer][trace], layers 0..L; vectors taken at each trace's final
  // reasoning token.
  std::vector<std::vector<std::vector<double>>> efficient;
  std::vector<std::vector<std::vector<double>>> verbose;
  std::vector<std::uint64_t> efficient_ids, verbose_ids;
  SelectionRule rule;
  std::string model_hash;
};

// Ids (into `records`) chosen for each side, without touching the model.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> select_traces(
    const std::vector<task::TraceRecord>& records, const SelectionRule& rule);

ContrastiveSets collect_snapshots(const model::Transformer& model, const std::vector<task::TraceRecord>& records,
                                  const SelectionRule& rule, int threads = 1);

struct SteeringDirection {
  // v[l], mu_efficient[l], mu_verbose[l] for l in [0, L]; slot 0 (the
  // embedding output) is kept for completeness but is not a valid target.
  std::vector<std::vector<double>> v, mu_efficient, mu_verbose;
  nlohmann::json manifest;  // model_hash, set sizes, rule

  int n_layers() const { return static_cast<int>(v.size()) - 1; }
  std::string model_hash() const { return manifest.value("model_hash", ""); }
  double norm(int layer) const;

  void save(const std::string& path) const;
  static SteeringDirection load(const std::string& path);
};

SteeringDirection extract_direction(const ContrastiveSets& sets);

struct SteeringConfig {
  int layer = 2;        // residual index in [1, L]
  double lambda = 0.0;  // positive moves toward the efficient mean
  // Experimental: keep adding lambda*v at every generated position too.
  bool continuous = false;
  // Accept a direction extracted from a different checkpoint.
  bool allow_hash_mismatch = false;
};

// Hooks implementing the intervention for a prompt of `prompt_len` tokens.
std::vector<model::ResidualHook> steering_hooks(const SteeringDirection& dir, const SteeringConfig& cfg,
                                                std::size_t prompt_len);

// Throws ContractError when the direction does not belong to `model` (unless
// overridden) or the layer is invalid.
void check_compatible(const model::Transformer& model, const SteeringDirection& dir, const SteeringConfig& cfg);

task::TraceRecord steered_sample(const model::Transformer& model, const task::Problem& problem,
                                 const model::SamplerConfig& sampler, const SteeringDirection& dir,
                                 const SteeringConfig& cfg);

struct SweepRow {
  int layer = 0;
  double lambda = 0.0;
  eval::Summary summary;
};

struct SweepReport {
  eval::Summary baseline;  // unsteered
  std::vector<SweepRow> rows;  // layer-major, then lambda in grid order
  int recommended_layer = 0;
  double recommended_lambda = 0.0;
  bool recommended_found = false;
  // Spearman(lambda, mean_length) per layer, grid order.
  std::vector<std::pair<int, double>> spearman;
  double tolerance = 0.02;

  const SweepRow& recommended() const;
  double spearman_for(int layer) const;
};

SweepReport sweep(const model::Transformer& model, const SteeringDirection& dir, const std::vector<double>& lambdas,
                  const std::vector<int>& layers, const std::vector<task::Problem>& problems,
                  const eval::EvalSpec& spec, double tolerance = 0.02, bool allow_hash_mismatch = false);

void write_sweep_csv(const std::string& path, const SweepReport& report);
std::string sweep_svg_length(const SweepReport& report);
std::string sweep_svg_pass1(const SweepReport& report);
nlohmann::json to_json(const SweepReport& report);

}  // namespace terse::steer
