#include "terse/rl.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "terse/optim.hpp"
#include "terse/svg.hpp"
#include "terse/util.hpp"

namespace terse::rl {

void RewardSpec::validate() const {
  if (!(lambda1 > 0.0)) throw ContractError("reward: lambda1 must be > 0");
  if (!(lambda2 >= 0.0)) throw ContractError("reward: lambda2 must be >= 0");
}

void GrpoConfig::validate() const {
  if (group_size < 2) throw ContractError("grpo: group_size must be >= 2");
  if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ContractError("grpo: clip_eps must lie in (0,1)");
  if (!(kl_beta >= 0.0)) throw ContractError("grpo: kl_beta must be >= 0");
  if (!(lr > 0.0)) throw ContractError("grpo: lr must be > 0");
  if (batch_prompts <= 0) throw ContractError("grpo: batch_prompts must be positive");
  if (max_new_tokens <= 0) throw ContractError("grpo: max_new_tokens must be positive");
  if (!(kl_ceiling > 0.0)) throw ContractError("grpo: kl_ceiling must be > 0");
}

nlohmann::json to_json(const RewardSpec& s) { return {{"lambda1", s.lambda1}, {"lambda2", s.lambda2}}; }

nlohmann::json to_json(const GrpoConfig& c) {
  return {{"group_size", c.group_size},
          {"clip_eps", c.clip_eps},
          {"kl_beta", c.kl_beta},
          {"lr", c.lr},
          {"batch_prompts", c.batch_prompts},
          {"max_new_tokens", c.max_new_tokens},
          {"kl_ceiling", c.kl_ceiling},
          {"grad_clip", c.grad_clip},
          {"rollout_temperature", c.rollout_temperature},
          {"rollout_top_p", c.rollout_top_p}};
}

void apply_json(const nlohmann::json& j, RewardSpec& s) {
  for (const auto& [key, value] : j.items()) {
    if (key == "lambda1") s.lambda1 = value.get<double>();
    else if (key == "lambda2") s.lambda2 = value.get<double>();
    else throw ContractError("reward config: unknown key '" + key + "'");
  }
  s.validate();
}

void apply_json(const nlohmann::json& j, GrpoConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "group_size") c.group_size = value.get<int>();
    else if (key == "clip_eps") c.clip_eps = value.get<double>();
    else if (key == "kl_beta") c.kl_beta = value.get<double>();
    else if (key == "lr") c.lr = value.get<double>();
    else if (key == "batch_prompts") c.batch_prompts = value.get<int>();
    else if (key == "max_new_tokens") c.max_new_tokens = value.get<int>();
    else if (key == "kl_ceiling") c.kl_ceiling = value.get<double>();
    else if (key == "grad_clip") c.grad_clip = value.get<double>();
    else if (key == "rollout_temperature") c.rollout_temperature = value.get<double>();
    else if (key == "rollout_top_p") c.rollout_top_p = value.get<double>();
    else throw ContractError("grpo config: unknown key '" + key + "'");
  }
  c.validate();
}

MinCorrect min_correct_length(const std::vector<task::TraceRecord>& group) {
  if (group.empty()) throw ContractError("min_correct_length: empty group");
  MinCorrect out;
  bool any = false;
  double total = 0.0;
  for (const auto& r : group) {
    total += static_cast<double>(r.length);
    if (r.correct && (!any || static_cast<double>(r.length) < out.length)) {
      out.length = static_cast<double>(r.length);
      any = true;
    }
  }
  if (!any) {
    out.length = total / static_cast<double>(group.size());
    out.fallback = true;
  }
  return out;
}

double reward(const task::TraceRecord& rollout, double group_min, const RewardSpec& spec) {
  const double excess = std::max(0.0, static_cast<double>(rollout.length) - group_min);
  return spec.lambda1 * (rollout.correct ? 1.0 : 0.0) - spec.lambda2 * excess;
}

std::vector<double> group_advantages(const std::vector<double>& rewards) {
  if (rewards.size() < 2) throw ContractError("group_advantages: need at least 2 rewards");
  const double n = static_cast<double>(rewards.size());
  const double mu = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mu) * (r - mu);
  const double sd = std::sqrt(var / n);
  std::vector<double> adv(rewards.size(), 0.0);
  if (sd < 1e-8) return adv;
  for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mu) / sd;
  return adv;
}

std::vector<double> response_log_probs(const model::Transformer& model, const std::vector<int>& prompt,
                                       const std::vector<int>& response) {
  if (prompt.empty() || response.empty()) throw ContractError("response_log_probs: empty prompt or response");
  std::vector<int> seq(prompt);
  seq.insert(seq.end(), response.begin(), response.end());
  Graph g(GraphMode::frozen);
  const auto fr = model.forward(g, std::span<const int>(seq.data(), seq.size() - 1));
  const auto lp = g.token_log_probs(fr.logits, std::span<const int>(seq.data() + 1, seq.size() - 1));
  return {lp.data().begin() + static_cast<std::ptrdiff_t>(prompt.size() - 1), lp.data().end()};
}

RolloutTerms rollout_objective(Graph& g, const model::Transformer& policy, const RolloutData& r,
                               const GrpoConfig& cfg) {
  const std::size_t P = r.prompt.size(), R = r.response.size();
  if (P == 0 || R == 0 || r.old_logp.size() != R || r.ref_logp.size() != R)
    throw ContractError("rollout_objective: log-prob arrays do not align with rollout " + std::to_string(r.id));
  std::vector<int> seq(r.prompt);
  seq.insert(seq.end(), r.response.begin(), r.response.end());
  const auto fr = policy.forward(g, std::span<const int>(seq.data(), seq.size() - 1));
  const auto logits = g.slice_rows(fr.logits, P - 1, P + R - 1);
  const auto lp = g.token_log_probs(logits, r.response);

  std::vector<double> neg_old(R);
  for (std::size_t t = 0; t < R; ++t) neg_old[t] = -r.old_logp[t];
  const auto ratio = g.exp(g.add_constant(lp, neg_old));
  for (double x : ratio.data())
    if (!std::isfinite(x)) throw NonFiniteError("grpo: non-finite importance ratio in rollout " + std::to_string(r.id));

  const double A = r.advantage;
  const auto unclipped = g.scale(ratio, A);
  const auto clipped = g.scale(g.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps), A);
  const auto surr = g.minimum(unclipped, clipped);

  const auto d = g.add_constant(g.scale(lp, -1.0), r.ref_logp);  // log(pi_ref / pi_theta)
  const auto kl = g.add_scalar(g.sub(g.exp(d), d), -1.0);

  RolloutTerms out;
  out.objective = g.mean(g.sub(surr, g.scale(kl, cfg.kl_beta)));
  out.tokens = R;
  double kl_sum = 0.0;
  for (std::size_t t = 0; t < R; ++t) {
    kl_sum += kl[t];
    if (clipped[t] < unclipped[t]) ++out.clipped;
  }
  out.mean_kl = kl_sum / static_cast<double>(R);
  return out;
}

Tensor grpo_loss(Graph& g, const model::Transformer& policy, const GrpoBatch& batch, const GrpoConfig& cfg) {
  if (batch.data.empty()) throw ContractError("grpo_loss: empty batch");
  Tensor total;
  for (const auto& r : batch.data) {
    auto obj = rollout_objective(g, policy, r, cfg).objective;
    total = total.defined() ? g.add(total, obj) : obj;
  }
  return g.scale(total, -1.0 / static_cast<double>(batch.data.size()));
}

GrpoBatch build_batch(const model::Transformer& policy, const model::Transformer& reference,
                      const task::Problem& problem, const RewardSpec& reward_spec, const GrpoConfig& cfg,
                      std::uint64_t seed, std::uint64_t id_base) {
  GrpoBatch b;
  b.problem = problem;
  const auto G = static_cast<std::size_t>(cfg.group_size);
  model::SamplerConfig sc;
  sc.temperature = cfg.rollout_temperature;
  sc.top_p = cfg.rollout_top_p;
  sc.max_new_tokens = cfg.max_new_tokens;
  model::SampleOptions opts;
  opts.record_log_probs = true;
  const auto prompt = problem.prompt_tokens();
  for (std::size_t i = 0; i < G; ++i) {
    sc.seed = task::mix_seed(seed, i);
    auto ro = model::sample(policy, problem, sc, opts);
    ro.record.id = id_base + i;
    RolloutData d;
    d.id = ro.record.id;
    d.prompt = prompt;
    d.response = ro.record.response;
    d.old_logp = std::move(ro.log_probs);
    d.ref_logp = response_log_probs(reference, d.prompt, d.response);
    b.data.push_back(std::move(d));
    b.rollouts.push_back(std::move(ro.record));
  }
  const auto mc = min_correct_length(b.rollouts);
  b.fallback = mc.fallback;
  for (const auto& r : b.rollouts) b.rewards.push_back(reward(r, mc.length, reward_spec));
  b.advantages = group_advantages(b.rewards);
  for (std::size_t i = 0; i < G; ++i) b.data[i].advantage = b.advantages[i];
  return b;
}

namespace {

std::string rng_text(const std::mt19937_64& rng) {
  std::ostringstream o;
  o << rng;
  return o.str();
}

eval::Summary evaluate(const model::Transformer& m, const TrainOptions& opts) {
  return eval::summarize(eval::sample_groups(m, opts.eval_problems, opts.eval_spec));
}

}  // namespace

TrainResult train(const model::Checkpoint& init, const std::vector<task::Problem>& problems,
                  const RewardSpec& reward_spec, const GrpoConfig& cfg, const TrainOptions& opts) {
  reward_spec.validate();
  cfg.validate();
  if (opts.steps < 0) throw ContractError("rl: steps must be >= 0");
  if (problems.empty()) throw ContractError("rl: no training problems");

  TrainResult res;
  res.checkpoint.model = init.model.deep_copy();
  res.checkpoint.model.set_requires_grad(true);
  const model::Transformer reference = init.model.deep_copy();
  auto& policy = res.checkpoint.model;
  auto params = policy.parameters();
  res.checkpoint.optimizer = AdamState::for_params(params);

  std::mt19937_64 rng(opts.seed);
  std::vector<std::size_t> order(problems.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  const bool evaluating = !opts.eval_problems.empty();
  if (evaluating) {
    res.evals.push_back({0, evaluate(policy, opts)});
    if (opts.on_eval) opts.on_eval(0, policy);
  }

  const auto B = static_cast<std::size_t>(cfg.batch_prompts);
  const auto G = static_cast<std::size_t>(cfg.group_size);
  for (int step = 0; step < opts.steps; ++step) {
    std::vector<std::size_t> picks;
    for (std::size_t i = 0; i < B; ++i) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      picks.push_back(order[cursor++]);
    }

    // pi_theta_old is the current policy: rollouts and their log-probs are
    // taken before this step's update.
    std::vector<GrpoBatch> batches(B);
    const std::uint64_t step_seed = task::mix_seed(opts.seed, 0x5EED0000ULL + static_cast<std::uint64_t>(step));
    parallel_for(B, opts.threads, [&](std::size_t i) {
      batches[i] = build_batch(policy, reference, problems[picks[i]], reward_spec, cfg,
                               task::mix_seed(step_seed, i), (static_cast<std::uint64_t>(step) * B + i) * G);
    });

    policy.zero_grad();
    StepLog row;
    row.step = step;
    const double scale = -1.0 / static_cast<double>(B * G);
    double kl_sum = 0.0, reward_sum = 0.0, len_sum = 0.0;
    std::size_t clipped = 0, tokens = 0, correct = 0;
    for (const auto& b : batches) {
      row.fallback_groups += b.fallback ? 1 : 0;
      for (std::size_t i = 0; i < G; ++i) {
        reward_sum += b.rewards[i];
        len_sum += static_cast<double>(b.rollouts[i].length);
        correct += b.rollouts[i].correct ? 1 : 0;
        Graph g;
        auto terms = rollout_objective(g, policy, b.data[i], cfg);
        kl_sum += terms.mean_kl;
        clipped += terms.clipped;
        tokens += terms.tokens;
        g.backward(g.scale(terms.objective, scale));
      }
    }
    const double n = static_cast<double>(B * G);
    row.mean_reward = reward_sum / n;
    row.pass1 = static_cast<double>(correct) / n;
    row.mean_length = len_sum / n;
    row.mean_kl = kl_sum / n;
    row.clip_fraction = tokens ? static_cast<double>(clipped) / static_cast<double>(tokens) : 0.0;

    if (!(row.mean_kl <= cfg.kl_ceiling)) {
      model::Checkpoint last_good;
      last_good.model = policy.deep_copy();
      last_good.step = init.step + static_cast<std::uint64_t>(step);
      throw RlDiverged("rl: mean KL " + std::to_string(row.mean_kl) + " exceeds ceiling " +
                           std::to_string(cfg.kl_ceiling) + " at step " + std::to_string(step) +
                           " (mean length " + std::to_string(row.mean_length) + ", pass@1 " +
                           std::to_string(row.pass1) + ")",
                       std::move(last_good));
    }
    if (cfg.grad_clip > 0.0) clip_grad_norm(params, cfg.grad_clip);
    adam_step(params, res.checkpoint.optimizer, cfg.lr);
    res.log.push_back(row);
    if (opts.on_step) opts.on_step(row);

    const int done = step + 1;
    if (evaluating && ((opts.eval_every > 0 && done % opts.eval_every == 0) || done == opts.steps)) {
      res.evals.push_back({done, evaluate(policy, opts)});
      if (opts.on_eval) opts.on_eval(done, policy);
    }
  }
  policy.zero_grad();
  res.checkpoint.step = init.step + static_cast<std::uint64_t>(opts.steps);
  res.checkpoint.rng_state = rng_text(rng);
  return res;
}

void write_log_csv(const std::string& path, const std::vector<StepLog>& log) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "step,mean_reward,pass1,mean_length,mean_kl,clip_fraction,fallback_groups\n";
  for (const auto& r : log)
    out << r.step << ',' << fmt_double(r.mean_reward) << ',' << fmt_double(r.pass1) << ','
        << fmt_double(r.mean_length) << ',' << fmt_double(r.mean_kl) << ',' << fmt_double(r.clip_fraction) << ','
        << r.fallback_groups << '\n';
}

void write_eval_csv(const std::string& path, const std::vector<EvalPoint>& evals) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "step,pass1,mean_length,mean_correct_length,n\n";
  for (const auto& e : evals)
    out << e.step << ',' << fmt_double(e.summary.pass1) << ',' << fmt_double(e.summary.mean_length) << ','
        << fmt_double(e.summary.mean_correct_length) << ',' << e.summary.n << '\n';
}

double drop_fraction_by(const std::vector<EvalPoint>& evals, int step) {
  if (evals.size() < 2) throw ContractError("drop_fraction_by: need at least two evaluations");
  const double base = evals.front().summary.mean_length;
  const double total = base - evals.back().summary.mean_length;
  if (!(total > 0.0)) return std::nan("");
  const EvalPoint* at = &evals.front();
  for (const auto& e : evals)
    if (e.step <= step) at = &e;
  return (base - at->summary.mean_length) / total;
}

DifficultyAblation ablation_difficulty(const model::Checkpoint& init, const std::vector<task::Problem>& problems,
                                       const RewardSpec& reward_spec, const GrpoConfig& cfg,
                                       const TrainOptions& opts) {
  if (opts.eval_problems.empty()) throw ContractError("ablation_difficulty: no eval problems");
  std::vector<task::Problem> easy, hard;
  for (const auto& p : problems) (p.difficulty <= 3 ? easy : hard).push_back(p);
  if (easy.empty() || hard.empty())
    throw ContractError("ablation_difficulty: empty split (easy " + std::to_string(easy.size()) + ", hard " +
                        std::to_string(hard.size()) + ")");
  DifficultyAblation a;
  a.easy = train(init, easy, reward_spec, cfg, opts);
  a.hard = train(init, hard, reward_spec, cfg, opts);
  a.easy_eval = a.easy.evals.back().summary;
  a.hard_eval = a.hard.evals.back().summary;
  return a;
}

namespace {
std::string duration_svg(const std::vector<EvalPoint>& evals, bool length) {
  svg::Series s{length ? "mean length" : "pass@1", {}, {}};
  for (const auto& e : evals) {
    s.x.push_back(e.step);
    s.y.push_back(length ? e.summary.mean_length : e.summary.pass1);
  }
  return length ? svg::line_chart("Average reasoning length over training", "step", "mean length", {s})
                : svg::line_chart("Accuracy over training", "step", "pass@1", {s});
}
}  // namespace

std::string duration_svg_length(const std::vector<EvalPoint>& evals) { return duration_svg(evals, true); }
std::string duration_svg_pass1(const std::vector<EvalPoint>& evals) { return duration_svg(evals, false); }

std::string difficulty_svg(const DifficultyAblation& a) {
  std::vector<svg::Series> series;
  for (const auto* r : {&a.easy, &a.hard}) {
    svg::Series s{r == &a.easy ? "easy (1-3)" : "hard (4-5)", {}, {}};
    for (const auto& e : r->evals) {
      s.x.push_back(e.step);
      s.y.push_back(e.summary.mean_length);
    }
    series.push_back(std::move(s));
  }
  return svg::line_chart("Eval length by training split", "step", "mean length", series);
}

void write_difficulty_csv(const std::string& path, const DifficultyAblation& a) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "split,step,pass1,mean_length,mean_correct_length,n\n";
  for (const auto& [name, r] : {std::pair{"easy", &a.easy}, std::pair{"hard", &a.hard}})
    for (const auto& e : r->evals)
      out << name << ',' << e.step << ',' << fmt_double(e.summary.pass1) << ',' << fmt_double(e.summary.mean_length)
          << ',' << fmt_double(e.summary.mean_correct_length) << ',' << e.summary.n << '\n';
}

}  // namespace terse::rl
