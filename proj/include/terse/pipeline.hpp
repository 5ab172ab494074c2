#pragma once

// Experiment configuration and the pipeline stages behind the CLI.
//
// Each stage writes into <out>/<stage>/: its artifacts, manifest.json
// (command, hash of the config sections the stage reads, input hashes,
// version, output hashes), the full resolved config, and timing.json. Timing
// lives outside the manifest so manifests are byte-identical across
// identical runs.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "terse/model.hpp"
#include "terse/pretrain.hpp"
#include "terse/rl.hpp"
#include "terse/sampler.hpp"
#include "terse/steering.hpp"
#include "terse/task.hpp"

namespace terse::pipeline {

inline constexpr const char* kVersion = "0.1.0";

struct TaskgenSection {
  std::size_t pretrain_problems = 50000;
  task::DifficultyRange difficulty{1, 5};
  task::Mixture mixture{{0.0, 0.25}, {0.8, 0.75}};
  std::size_t eval_problems = 100;
  std::size_t extract_problems = 400;
  std::size_t rl_problems = 2000;
  std::size_t analysis_problems = 200;
};

struct EvalSection {
  int k = 8;
};

struct SteeringSection {
  std::size_t k_per_side = 150;
  steer::Scope scope = steer::Scope::per_prompt;
  std::vector<int> layers{1, 2, 3, 4};
  std::vector<double> lambdas{-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 4.0};
  double tolerance = 0.02;
  bool allow_hash_mismatch = false;
};

struct RlSection {
  int steps = 60;
  int eval_every = 10;
};

struct AnalysisSection {
  int pca_layer = 2;
};

struct ExperimentConfig {
  std::optional<std::uint64_t> seed;  // mandatory before any stage runs
  model::ModelConfig model;
  model::PretrainConfig pretrain;
  model::SamplerConfig sampler;
  TaskgenSection taskgen;
  EvalSection eval;
  SteeringSection steering;
  rl::RewardSpec reward;
  rl::GrpoConfig grpo;
  RlSection rl;
  AnalysisSection analysis;

  std::uint64_t require_seed() const;
};

ExperimentConfig default_config();
// Overlay `j` onto the defaults; unknown keys anywhere are rejected.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig load_config(const std::string& path);

class StageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunOptions {
  std::filesystem::path out;
  int threads = 1;
  bool force = false;
  bool skip_if_fresh = false;
  bool quiet = false;
};

enum class StageStatus { ran, skipped };

// Stage names double as subcommand names and directory names.
inline const std::vector<std::string> kStages = {"gen-data",        "pretrain",          "extract-direction",
                                                 "steer-sweep",     "rl-train",          "ablate-duration",
                                                 "ablate-difficulty", "analyze",         "report"};

StageStatus run_stage(const std::string& stage, const ExperimentConfig& cfg, const RunOptions& opts);

// SHA-256 of the canonical JSON dump.
std::string config_hash(const nlohmann::json& j);

// Load <out>/<stage>/manifest.json, or throw naming the missing stage.
nlohmann::json read_manifest(const std::filesystem::path& out, const std::string& stage);

// Resolve an artifact produced by `stage`, verifying its recorded hash.
std::filesystem::path verified_input(const std::filesystem::path& out, const std::string& stage,
                                     const std::string& name);

}  // namespace terse::pipeline
