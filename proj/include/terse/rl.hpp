#pragma once

// Self-rewarded efficiency RL: length-penalised correctness reward relative
// to the shortest correct rollout of each group, optimised with GRPO
// (group-relative advantages, clipped ratios, KL penalty to a frozen
// reference policy).

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "terse/checkpoint.hpp"
#include "terse/eval.hpp"
#include "terse/task.hpp"

namespace terse::rl {

struct RewardSpec {
  double lambda1 = 1.0;
  double lambda2 = 0.001;  // per-token penalty
  void validate() const;
};

struct MinCorrect {
  double length = 0.0;
  bool fallback = false;  // no correct rollout: group mean length used
};

MinCorrect min_correct_length(const std::vector<task::TraceRecord>& group);

double reward(const task::TraceRecord& rollout, double group_min, const RewardSpec& spec);

// (r - mean) / std with population std; all zeros when std < 1e-8.
std::vector<double> group_advantages(const std::vector<double>& rewards);

struct GrpoConfig {
  int group_size = 8;
  double clip_eps = 0.2;
  double kl_beta = 0.01;
  double lr = 3e-5;
  int batch_prompts = 16;
  int max_new_tokens = 160;
  double kl_ceiling = 1.0;  // mean per-token KL that halts training
  double grad_clip = 1.0;
  // Rollout sampling policy. Temperature 1 / top_p 1 samples exactly from
  // pi_theta_old, which the importance ratio assumes.
  double rollout_temperature = 1.0;
  double rollout_top_p = 1.0;
  void validate() const;
};

nlohmann::json to_json(const RewardSpec& s);
nlohmann::json to_json(const GrpoConfig& c);
// Unknown keys are rejected.
void apply_json(const nlohmann::json& j, RewardSpec& s);
void apply_json(const nlohmann::json& j, GrpoConfig& c);

struct RolloutData {
  std::uint64_t id = 0;
  std::vector<int> prompt;
  std::vector<int> response;     // generated tokens, all supervised
  std::vector<double> old_logp;  // per response token under pi_theta_old
  std::vector<double> ref_logp;  // per response token under pi_ref
  double advantage = 0.0;
};

struct GrpoBatch {
  task::Problem problem;
  std::vector<task::TraceRecord> rollouts;
  std::vector<double> rewards;
  std::vector<double> advantages;
  std::vector<RolloutData> data;
  bool fallback = false;
};

// Per-response-token log-probabilities of `response` given `prompt`.
std::vector<double> response_log_probs(const model::Transformer& model, const std::vector<int>& prompt,
                                       const std::vector<int>& response);

struct RolloutTerms {
  Tensor objective;  // (1/|o|) sum_t [surrogate - beta * KL]
  double mean_kl = 0.0;
  std::size_t clipped = 0;  // tokens whose clipped branch was selected
  std::size_t tokens = 0;
};

RolloutTerms rollout_objective(Graph& g, const model::Transformer& policy, const RolloutData& r,
                               const GrpoConfig& cfg);

// -(1/G) sum_i objective_i for one group, built in a single graph.
Tensor grpo_loss(Graph& g, const model::Transformer& policy, const GrpoBatch& batch, const GrpoConfig& cfg);

// Sample G rollouts for one prompt under `policy`, score and fill log-probs.
GrpoBatch build_batch(const model::Transformer& policy, const model::Transformer& reference,
                      const task::Problem& problem, const RewardSpec& reward_spec, const GrpoConfig& cfg,
                      std::uint64_t seed, std::uint64_t id_base);

struct StepLog {
  int step = 0;
  double mean_reward = 0.0;
  double pass1 = 0.0;
  double mean_length = 0.0;
  double mean_kl = 0.0;
  double clip_fraction = 0.0;
  int fallback_groups = 0;
};

struct EvalPoint {
  int step = 0;
  eval::Summary summary;
};

class RlDiverged : public std::runtime_error {
 public:
  RlDiverged(const std::string& what, model::Checkpoint last_good)
      : std::runtime_error(what), last_good(std::move(last_good)) {}
  model::Checkpoint last_good;
};

struct TrainOptions {
  int steps = 60;
  std::uint64_t seed = 1;
  int threads = 1;
  // Evaluate on eval_problems before step 0 and after every eval_every steps
  // (0 disables periodic evaluation; the final step is always evaluated
  // when eval problems are given).
  int eval_every = 0;
  std::vector<task::Problem> eval_problems;
  eval::EvalSpec eval_spec;
  std::function<void(const StepLog&)> on_step;
  // Called at every evaluation point with the policy being evaluated.
  std::function<void(int step, const model::Transformer&)> on_eval;
};

struct TrainResult {
  model::Checkpoint checkpoint;
  std::vector<StepLog> log;
  std::vector<EvalPoint> evals;
};

TrainResult train(const model::Checkpoint& init, const std::vector<task::Problem>& problems,
                  const RewardSpec& reward_spec, const GrpoConfig& cfg, const TrainOptions& opts);

void write_log_csv(const std::string& path, const std::vector<StepLog>& log);
void write_eval_csv(const std::string& path, const std::vector<EvalPoint>& evals);

// Fraction of the total mean-length drop reached by `step` (NaN when the
// total drop is not positive).
double drop_fraction_by(const std::vector<EvalPoint>& evals, int step);

struct DifficultyAblation {
  TrainResult easy, hard;
  eval::Summary easy_eval, hard_eval;  // on the full-difficulty eval set
};

DifficultyAblation ablation_difficulty(const model::Checkpoint& init, const std::vector<task::Problem>& problems,
                                       const RewardSpec& reward_spec, const GrpoConfig& cfg,
                                       const TrainOptions& opts);

std::string duration_svg_length(const std::vector<EvalPoint>& evals);
std::string duration_svg_pass1(const std::vector<EvalPoint>& evals);
std::string difficulty_svg(const DifficultyAblation& a);
void write_difficulty_csv(const std::string& path, const DifficultyAblation& a);

}  // namespace terse::rl
