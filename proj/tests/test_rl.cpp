#include <doctest.h>

#include <cmath>
#include <random>

#include "helpers.hpp"
#include "oracles.hpp"
#include "terse/rl.hpp"

using namespace terse;
using namespace terse::rl;

namespace {

task::TraceRecord rollout(std::size_t length, bool correct) {
  task::TraceRecord r;
  r.length = length;
  r.correct = correct;
  return r;
}

model::Transformer tiny_model(std::uint64_t seed) {
  model::ModelConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_context = 64;
  model::Transformer m(c, seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> d(0.0, 0.05);
  for (auto& [name, t] : m.named_parameters())
    for (auto& v : t.mutable_data()) v += d(rng);
  return m;
}

RolloutData make_rollout(const model::Transformer& m, std::uint64_t id, std::vector<int> prompt,
                         std::vector<int> response, double advantage, double old_shift, std::mt19937_64& rng) {
  RolloutData r;
  r.id = id;
  r.prompt = std::move(prompt);
  r.response = std::move(response);
  r.advantage = advantage;
  const auto lp = response_log_probs(m, r.prompt, r.response);
  std::uniform_real_distribution<double> u(-0.08, 0.08);
  for (double x : lp) {
    r.old_logp.push_back(x + old_shift + u(rng));
    r.ref_logp.push_back(x + u(rng) * 3);
  }
  return r;
}

}  // namespace

TEST_CASE("reward examples") {
  const RewardSpec spec;
  CHECK(reward(rollout(10, true), 10, spec) == 1.0);
  CHECK(reward(rollout(110, false), 10, spec) == doctest::Approx(-0.1).epsilon(1e-12));
  CHECK(reward(rollout(5, true), 10, spec) == 1.0);
  RewardSpec bad;
  bad.lambda2 = -1;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("reward matches an independent implementation exactly") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> w(0.0, 2.0);
  for (int i = 0; i < 10000; ++i) {
    const RewardSpec spec{w(rng), w(rng) / 100};
    const bool correct = rng() % 2;
    const auto len = static_cast<std::size_t>(rng() % 200);
    const double min_len = static_cast<double>(rng() % 200) + (rng() % 2 ? 0.5 : 0.0);
    CHECK(reward(rollout(len, correct), min_len, spec) ==
          oracle::reward(correct, static_cast<double>(len), min_len, spec.lambda1, spec.lambda2));
  }
}

TEST_CASE("shortest correct rollout attains the maximal group reward") {
  std::mt19937_64 rng(2);
  const RewardSpec spec;
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<task::TraceRecord> group;
    for (int i = 0; i < 8; ++i) group.push_back(rollout(1 + rng() % 80, rng() % 3 != 0));
    const auto mc = min_correct_length(group);
    double best = -1e300, shortest_correct = -1e300;
    std::size_t shortest_len = SIZE_MAX;
    for (const auto& r : group) {
      const double rw = reward(r, mc.length, spec);
      best = std::max(best, rw);
      if (r.correct && r.length < shortest_len) {
        shortest_len = r.length;
        shortest_correct = rw;
      }
    }
    if (mc.fallback) continue;
    CHECK(shortest_correct == best);
    CHECK(shortest_correct == spec.lambda1);
  }
}

TEST_CASE("scaling lengths preserves the ranking among correct rollouts") {
  std::mt19937_64 rng(3);
  const RewardSpec spec;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<task::TraceRecord> g1, g3;
    for (int i = 0; i < 8; ++i) {
      const auto len = 1 + rng() % 50;
      g1.push_back(rollout(len, true));
      g3.push_back(rollout(3 * len, true));
    }
    const double m1 = min_correct_length(g1).length, m3 = min_correct_length(g3).length;
    for (int a = 0; a < 8; ++a)
      for (int b = 0; b < 8; ++b)
        CHECK((reward(g1[a], m1, spec) < reward(g1[b], m1, spec)) == (reward(g3[a], m3, spec) < reward(g3[b], m3, spec)));
  }
}

TEST_CASE("minimum correct length falls back to the group mean") {
  const auto mc = min_correct_length({rollout(4, false), rollout(8, false)});
  CHECK(mc.fallback);
  CHECK(mc.length == 6.0);
  const auto ok = min_correct_length({rollout(4, false), rollout(9, true), rollout(7, true)});
  CHECK_FALSE(ok.fallback);
  CHECK(ok.length == 7.0);
  CHECK_THROWS_AS(min_correct_length({}), ContractError);
}

TEST_CASE("minimum correct length examples") {
  CHECK(min_correct_length({rollout(120, true), rollout(300, true), rollout(95, true)}).length == 95.0);
  CHECK(min_correct_length({rollout(50, false), rollout(200, true), rollout(10, false)}).length == 200.0);
  const auto fb = min_correct_length({rollout(100, false), rollout(300, false)});
  CHECK(fb.length == 200.0);
  CHECK(fb.fallback);
}

TEST_CASE("alternating rewards standardise to plus and minus one") {
  const auto a = group_advantages({1, 0, 1, 0});
  const std::vector<double> want{1, -1, 1, -1};
  for (std::size_t i = 0; i < 4; ++i) CHECK(a[i] == doctest::Approx(want[i]).epsilon(1e-15));
}

TEST_CASE("grpo loss vanishes when all three policies coincide") {
  auto m = tiny_model(15);
  GrpoBatch batch;
  const std::vector<int> prompt{13, 3, 10, 4, 12};
  const std::vector<std::vector<int>> responses{{16, 3, 10, 4, 12, 7, 15, 7, 14}, {16, 3, 11, 2, 15, 6, 14},
                                                {15, 1, 14}, {16, 3, 10, 4, 12, 7, 17, 19, 15, 7, 14}};
  const auto adv = group_advantages({1.0, 0.2, -0.5, 0.4});
  for (std::size_t i = 0; i < responses.size(); ++i) {
    RolloutData r;
    r.id = i;
    r.prompt = prompt;
    r.response = responses[i];
    r.advantage = adv[i];
    r.old_logp = r.ref_logp = response_log_probs(m, prompt, r.response);
    batch.data.push_back(r);
  }
  Graph g(GraphMode::frozen);
  CHECK(std::abs(grpo_loss(g, m, batch, {}).item()) < 1e-12);
}

TEST_CASE("group advantages are standardised") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 500; ++trial) {
    const auto r = testing::random_vec(2 + rng() % 15, rng);
    const auto a = group_advantages(r);
    double mean = 0, sq = 0;
    for (double x : a) mean += x / static_cast<double>(a.size());
    for (double x : a) sq += (x - mean) * (x - mean) / static_cast<double>(a.size());
    CHECK(std::abs(mean) < 1e-10);
    CHECK(std::abs(std::sqrt(sq) - 1.0) < 1e-10);
  }
  for (double x : group_advantages({0.5, 0.5, 0.5})) CHECK(x == 0.0);
  CHECK_THROWS_AS(group_advantages({1.0}), ContractError);
}

TEST_CASE("grpo loss gradient matches finite differences") {
  auto m = tiny_model(5);
  std::mt19937_64 rng(6);
  GrpoBatch batch;
  batch.data.push_back(make_rollout(m, 0, {13, 3, 10, 4, 12}, {16, 3, 10, 4, 12, 7, 15, 7, 14}, 1.3, 0.0, rng));
  batch.data.push_back(make_rollout(m, 1, {13, 3, 10, 4, 12}, {16, 3, 11, 2, 15, 6, 14}, -0.7, 0.0, rng));
  GrpoConfig cfg;
  cfg.kl_beta = 0.3;  // make the KL term visible in the gradient
  m.zero_grad();
  {
    Graph g;
    g.backward(grpo_loss(g, m, batch, cfg));
  }
  auto params = m.named_parameters();
  double worst = 0;
  for (int probe = 0; probe < 40; ++probe) {
    auto& t = params[rng() % params.size()].second;
    const std::size_t i = rng() % t.size();
    const double orig = t[i], h = 1e-5;
    t.mutable_data()[i] = orig + h;
    Graph gp(GraphMode::frozen);
    const double fp = grpo_loss(gp, m, batch, cfg).item();
    t.mutable_data()[i] = orig - h;
    Graph gm(GraphMode::frozen);
    const double fm = grpo_loss(gm, m, batch, cfg).item();
    t.mutable_data()[i] = orig;
    worst = std::max(worst, testing::rel_err(t.grad()[i], (fp - fm) / (2 * h)));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("fully clipped rollouts contribute no surrogate gradient") {
  auto m = tiny_model(7);
  std::mt19937_64 rng(8);
  // old log-probs 0.5 below current: ratio ~ e^0.5 > 1 + eps, positive advantage.
  auto r = make_rollout(m, 0, {13, 1, 10, 2, 12}, {16, 1, 10, 2, 12, 3, 15, 3, 14}, 1.0, -0.5, rng);
  GrpoConfig cfg;
  cfg.kl_beta = 0.0;
  m.zero_grad();
  Graph g;
  const auto terms = rollout_objective(g, m, r, cfg);
  CHECK(terms.clipped == terms.tokens);
  g.backward(g.scale(terms.objective, -1.0));
  for (const auto& p : m.parameters())
    for (double x : p.grad()) CHECK(x == 0.0);
}

TEST_CASE("per-token KL estimate is non-negative and zero at the reference") {
  auto m = tiny_model(9);
  std::mt19937_64 rng(10);
  auto r = make_rollout(m, 0, {13, 1, 11, 2, 12}, {16, 1, 11, 2, 12, 2, 15, 2, 14}, 0.5, 0.0, rng);
  GrpoConfig cfg;
  {
    Graph g(GraphMode::frozen);
    CHECK(rollout_objective(g, m, r, cfg).mean_kl > 0.0);
  }
  r.ref_logp = response_log_probs(m, r.prompt, r.response);
  Graph g(GraphMode::frozen);
  CHECK(std::abs(rollout_objective(g, m, r, cfg).mean_kl) < 1e-15);
  r.old_logp.pop_back();
  CHECK_THROWS_AS(rollout_objective(g, m, r, cfg), ContractError);
}

TEST_CASE("config parsing rejects unknown keys") {
  GrpoConfig c;
  apply_json({{"lr", 1e-4}, {"group_size", 4}}, c);
  CHECK(c.lr == 1e-4);
  CHECK(c.group_size == 4);
  CHECK_THROWS_AS(apply_json({{"learning_rate", 1.0}}, c), ContractError);
  CHECK_THROWS(apply_json({{"clip_eps", -0.1}}, c));
  RewardSpec s;
  CHECK_THROWS_AS(apply_json({{"lambda3", 1.0}}, s), ContractError);
}

TEST_CASE("training loop") {
  model::Checkpoint init;
  init.model = tiny_model(11);
  const auto problems = task::gen_problems(10, {1, 1}, 12);
  GrpoConfig cfg;
  cfg.group_size = 4;
  cfg.batch_prompts = 2;
  cfg.max_new_tokens = 10;
  cfg.lr = 1e-3;
  cfg.kl_ceiling = 1e9;
  TrainOptions opts;
  opts.seed = 13;

  SUBCASE("zero steps leaves the policy unchanged") {
    opts.steps = 0;
    const auto res = train(init, problems, {}, cfg, opts);
    CHECK(model::model_hash(res.checkpoint.model) == model::model_hash(init.model));
    CHECK(res.log.empty());
  }
  SUBCASE("runs are reproducible and move the policy") {
    opts.steps = 5;
    opts.eval_problems = task::gen_problems(2, {1, 2}, 14);
    opts.eval_spec.k = 2;
    opts.eval_spec.sampler.max_new_tokens = 10;
    const auto a = train(init, problems, {}, cfg, opts);
    const auto b = train(init, problems, {}, cfg, opts);
    CHECK(model::model_hash(a.checkpoint.model) == model::model_hash(b.checkpoint.model));
    CHECK(model::model_hash(a.checkpoint.model) != model::model_hash(init.model));
    REQUIRE(a.log.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(a.log[i].mean_reward == b.log[i].mean_reward);
      CHECK(a.log[i].mean_length == b.log[i].mean_length);
      CHECK(a.log[i].mean_kl == b.log[i].mean_kl);
      CHECK(a.log[i].clip_fraction == b.log[i].clip_fraction);
    }
    CHECK(a.evals.size() == 2);
    CHECK(a.evals.back().step == 5);
    CHECK(a.checkpoint.step == 5);
  }
  SUBCASE("evaluation points follow the interval") {
    opts.steps = 4;
    opts.eval_every = 2;
    opts.eval_problems = task::gen_problems(2, {1, 2}, 14);
    opts.eval_spec.k = 1;
    opts.eval_spec.sampler.max_new_tokens = 10;
    const auto r = train(init, problems, {}, cfg, opts);
    REQUIRE(r.evals.size() == 3);
    CHECK(r.evals[1].step == 2);
    opts.eval_every = 4;
    CHECK(train(init, problems, {}, cfg, opts).evals.size() == 2);
  }
  SUBCASE("kl ceiling halts training") {
    opts.steps = 3;
    cfg.kl_ceiling = 1e-12;
    cfg.lr = 0.05;
    CHECK_THROWS_AS(train(init, problems, {}, cfg, opts), RlDiverged);
  }
}

TEST_CASE("drop fraction") {
  std::vector<EvalPoint> e(4);
  const double lens[] = {30, 24, 22, 20};
  const int steps[] = {0, 10, 30, 60};
  for (int i = 0; i < 4; ++i) {
    e[i].step = steps[i];
    e[i].summary.mean_length = lens[i];
  }
  CHECK(drop_fraction_by(e, 30) == doctest::Approx(0.8));
  CHECK(drop_fraction_by(e, 29) == doctest::Approx(0.6));
  e[3].summary.mean_length = 31;
  CHECK(std::isnan(drop_fraction_by(e, 30)));
}
