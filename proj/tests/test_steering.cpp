#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "helpers.hpp"
#include "oracles.hpp"
#include "terse/checkpoint.hpp"
#include "terse/steering.hpp"

using namespace terse;
using namespace terse::steer;

namespace {

model::Transformer tiny_model(std::uint64_t seed) {
  model::ModelConfig c;
  c.d_model = 16;
  c.n_layers = 3;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_context = 96;
  return model::Transformer(c, seed);
}

task::TraceRecord fake_record(std::uint64_t id, std::vector<int> prompt, std::size_t length, bool correct) {
  task::TraceRecord r;
  r.id = id;
  r.prompt = std::move(prompt);
  r.length = length;
  r.correct = correct;
  return r;
}

std::vector<task::TraceRecord> random_records(std::mt19937_64& rng, std::size_t n) {
  std::vector<task::TraceRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    const int prompt = static_cast<int>(rng() % 20);
    out.push_back(fake_record(i, {prompt}, 6 + rng() % 12, rng() % 4 != 0));
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

SteeringDirection random_direction(const model::Transformer& m, std::mt19937_64& rng) {
  SteeringDirection dir;
  for (int l = 0; l <= m.config().n_layers; ++l) {
    dir.v.push_back(testing::random_vec(16, rng));
    dir.mu_efficient.push_back(testing::random_vec(16, rng));
    dir.mu_verbose.push_back(testing::random_vec(16, rng));
  }
  dir.manifest = {{"model_hash", model::model_hash(m)}};
  return dir;
}

}  // namespace

TEST_CASE("global selection matches a sort oracle") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto recs = random_records(rng, 200);
    const SelectionRule rule{10, Scope::global};
    const auto [eff, verb] = select_traces(recs, rule);
    std::vector<std::pair<std::size_t, std::uint64_t>> correct;
    for (const auto& r : recs)
      if (r.correct) correct.emplace_back(r.length, r.id);
    std::sort(correct.begin(), correct.end());
    REQUIRE(eff.size() == 10);
    REQUIRE(verb.size() == 10);
    for (std::size_t i = 0; i < 10; ++i) {
      CHECK(recs[eff[i]].id == correct[i].second);
      CHECK(recs[verb[i]].id == correct[correct.size() - 1 - i].second);
    }
  }
}

TEST_CASE("per-prompt selection takes both ends of each gapped prompt") {
  std::vector<task::TraceRecord> recs{
      fake_record(0, {1}, 10, true), fake_record(1, {2}, 8, true),  fake_record(2, {1}, 6, true),
      fake_record(3, {2}, 8, true),  fake_record(4, {3}, 5, true),  fake_record(5, {3}, 20, false),
      fake_record(6, {4}, 9, true),  fake_record(7, {4}, 30, true), fake_record(8, {1}, 12, true)};
  const auto [eff, verb] = select_traces(recs, {2, Scope::per_prompt});
  // prompt 2 has no gap, prompt 3 has one correct trace.
  CHECK(eff == std::vector<std::size_t>{2, 6});
  CHECK(verb == std::vector<std::size_t>{8, 7});
  try {
    select_traces(recs, {3, Scope::per_prompt});
    FAIL("expected InsufficientTraces");
  } catch (const InsufficientTraces& e) {
    CHECK(e.achieved == 2);
    CHECK(e.required == 3);
  }
  CHECK_THROWS_AS(select_traces(recs, {5, Scope::global}), InsufficientTraces);
  CHECK_THROWS_AS(select_traces(recs, {0, Scope::global}), ContractError);
}

TEST_CASE("extracted direction equals the mean-difference oracle") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 25; ++trial) {
    ContrastiveSets sets;
    const std::size_t layers = 1 + rng() % 5, ne = 1 + rng() % 40, nv = 1 + rng() % 40, d = 1 + rng() % 24;
    sets.efficient.resize(layers);
    sets.verbose.resize(layers);
    for (std::size_t l = 0; l < layers; ++l) {
      for (std::size_t i = 0; i < ne; ++i) sets.efficient[l].push_back(testing::random_vec(d, rng, 10.0));
      for (std::size_t i = 0; i < nv; ++i) sets.verbose[l].push_back(testing::random_vec(d, rng, 10.0));
    }
    const auto dir = extract_direction(sets);
    for (std::size_t l = 0; l < layers; ++l) {
      const auto want = oracle::mean_difference(sets.efficient[l], sets.verbose[l]);
      for (std::size_t j = 0; j < d; ++j) CHECK(std::abs(dir.v[l][j] - want[j]) < 1e-12);
    }
  }
}

TEST_CASE("snapshots are residuals at the final reasoning token") {
  const auto m = tiny_model(3);
  std::vector<task::TraceRecord> recs;
  const auto probs = task::gen_problems(6, {1, 3}, 4);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    auto r = task::render_trace(probs[i], i % 2 ? 1.0 : 0.0, i);
    r.id = i;
    recs.push_back(r);
  }
  const auto sets = collect_snapshots(m, recs, {2, Scope::global}, 2);
  CHECK(sets.model_hash == model::model_hash(m));
  const auto& r = recs[static_cast<std::size_t>(sets.verbose_ids[0])];
  const auto seq = r.full_sequence();
  Graph g(GraphMode::frozen);
  model::ForwardOptions opts;
  opts.capture_residuals = true;
  const auto fr = m.forward(g, seq, opts);
  for (int l = 0; l <= 3; ++l)
    for (std::size_t j = 0; j < 16; ++j)
      CHECK(sets.verbose[static_cast<std::size_t>(l)][0][j] == fr.residuals[static_cast<std::size_t>(l)].at(r.final_reasoning_position, j));
}

TEST_CASE("zero coefficient steering is bit-identical to unsteered sampling") {
  const auto m = tiny_model(5);
  std::mt19937_64 rng(6);
  const auto dir = random_direction(m, rng);
  model::SamplerConfig sc;
  sc.max_new_tokens = 40;
  for (const auto& p : task::gen_problems(10, {1, 5}, 7)) {
    sc.seed = rng();
    const auto plain = model::sample(m, p, sc).record;
    for (int layer = 1; layer <= 3; ++layer) {
      const auto steered = steered_sample(m, p, sc, dir, {layer, 0.0, false, false});
      CHECK(steered.response == plain.response);
      REQUIRE(steered.steering.has_value());
      CHECK(steered.steering->layer == layer);
    }
  }
}

TEST_CASE("steering adds lambda v at the last prompt position only") {
  const auto m = tiny_model(8);
  std::mt19937_64 rng(9);
  const auto dir = random_direction(m, rng);
  const std::vector<int> toks{13, 4, 10, 5, 12, 16, 4, 10, 5};
  const std::size_t prompt_len = 5;
  Graph g(GraphMode::frozen);
  model::ForwardOptions plain_opts;
  plain_opts.capture_residuals = true;
  const auto plain = m.forward(g, toks, plain_opts);

  model::ForwardOptions opts;
  opts.capture_residuals = true;
  opts.hooks = steering_hooks(dir, {2, 1.5, false, false}, prompt_len);
  const auto steered = m.forward(g, toks, opts);
  for (std::size_t t = 0; t < toks.size(); ++t)
    for (std::size_t j = 0; j < 16; ++j) {
      const double base = plain.residuals[2].at(t, j);
      const double got = steered.residuals[2].at(t, j);
      if (t < prompt_len - 1) CHECK(got == base);
      if (t == prompt_len - 1) CHECK(got == doctest::Approx(base + 1.5 * dir.v[2][j]).epsilon(1e-14));
    }
  // Layers below the target are untouched everywhere.
  for (std::size_t i = 0; i < plain.residuals[1].size(); ++i) CHECK(plain.residuals[1][i] == steered.residuals[1][i]);
  // Continuous mode also edits generated positions.
  opts.hooks = steering_hooks(dir, {2, 1.5, true, false}, prompt_len);
  int fired = 0;
  for (auto& h : opts.hooks) {
    auto inner = h.fn;
    h.fn = [&, inner](std::size_t pos, std::span<double> row) {
      const double before = row[0];
      inner(pos, row);
      if (row[0] != before) ++fired;
    };
  }
  m.forward(g, toks, opts);
  CHECK(fired == static_cast<int>(toks.size() - prompt_len + 1));
}

TEST_CASE("compatibility checks") {
  const auto m = tiny_model(10);
  std::mt19937_64 rng(11);
  auto dir = random_direction(m, rng);
  CHECK_NOTHROW(check_compatible(m, dir, {1, 1.0, false, false}));
  CHECK_THROWS_AS(check_compatible(m, dir, {0, 1.0, false, false}), ContractError);
  CHECK_THROWS_AS(check_compatible(m, dir, {4, 1.0, false, false}), ContractError);
  const auto other = tiny_model(12);
  CHECK_THROWS_WITH_AS(check_compatible(other, dir, {1, 1.0, false, false}), doctest::Contains("hash"),
                       ContractError);
  CHECK_NOTHROW(check_compatible(other, dir, {1, 1.0, false, true}));
  dir.v.pop_back();
  CHECK_THROWS_AS(check_compatible(m, dir, {1, 1.0, false, true}), ContractError);
}

TEST_CASE("direction files round trip") {
  const auto m = tiny_model(13);
  std::mt19937_64 rng(14);
  const auto dir = random_direction(m, rng);
  const auto path = (std::filesystem::temp_directory_path() / "terse_dir_test.bin").string();
  dir.save(path);
  const auto back = SteeringDirection::load(path);
  CHECK(back.v == dir.v);
  CHECK(back.mu_efficient == dir.mu_efficient);
  CHECK(back.mu_verbose == dir.mu_verbose);
  CHECK(back.model_hash() == dir.model_hash());
  {
    std::ofstream out(path, std::ios::binary | std::ios::app);
    out << 'x';
  }
  CHECK_THROWS(SteeringDirection::load(path));
  std::filesystem::remove(path);
}

TEST_CASE("sweep recommends the shortest setting within tolerance") {
  const auto m = tiny_model(15);
  std::mt19937_64 rng(16);
  const auto dir = random_direction(m, rng);
  eval::EvalSpec spec;
  spec.k = 2;
  spec.sampler.max_new_tokens = 12;
  const auto problems = task::gen_problems(4, {1, 2}, 17);
  const auto rep = sweep(m, dir, {-1.0, 0.0, 2.0}, {1, 3}, problems, spec, 0.5);
  REQUIRE(rep.rows.size() == 6);
  CHECK(rep.rows[1].summary.mean_length == rep.baseline.mean_length);
  CHECK(rep.rows[4].summary.mean_length == rep.baseline.mean_length);
  double best = 1e300;
  for (const auto& r : rep.rows)
    if (r.summary.pass1 >= rep.baseline.pass1 - 0.5) best = std::min(best, r.summary.mean_length);
  REQUIRE(rep.recommended_found);
  CHECK(rep.recommended().summary.mean_length == best);
  CHECK(rep.spearman.size() == 2);
  const auto j = to_json(rep);
  CHECK(j.contains("recommended"));
}

TEST_CASE("degenerate contrastive sets") {
  std::mt19937_64 rng(30);
  ContrastiveSets same;
  same.efficient.resize(2);
  for (int i = 0; i < 5; ++i) same.efficient[1].push_back(testing::random_vec(8, rng));
  same.efficient[0] = same.efficient[1];
  same.verbose = same.efficient;
  for (const auto& v : extract_direction(same).v)
    for (double x : v) CHECK(x == 0.0);

  ContrastiveSets single;
  const auto a = testing::random_vec(8, rng), b = testing::random_vec(8, rng);
  single.efficient = {{a}};
  single.verbose = {{b}};
  const auto dir = extract_direction(single);
  for (std::size_t j = 0; j < 8; ++j) CHECK(dir.v[0][j] == a[j] - b[j]);
}
