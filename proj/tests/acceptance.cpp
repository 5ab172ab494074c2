// Acceptance suite. Runs the default pipeline through the CLI (reusing fresh
// stages), then checks each criterion and prints one line per criterion.
//
// usage: terse_acceptance [run-dir]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "oracles.hpp"
#include "terse/analysis.hpp"
#include "terse/checkpoint.hpp"
#include "terse/pipeline.hpp"
#include "terse/pretrain.hpp"
#include "terse/rl.hpp"
#include "terse/steering.hpp"
#include "terse/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace terse;

namespace {

// ---- pinned tolerances ---------------------------------------------------
constexpr int kFdProbes = 64;
constexpr double kFdRelTol = 1e-4;
constexpr double kFdStep = 1e-5;
constexpr double kFdSeconds = 60.0;
constexpr double kDirectionTol = 1e-12;
constexpr int kDirectionSets = 100;
constexpr int kRewardTriples = 10000;
constexpr double kAdvantageTol = 1e-10;
constexpr double kGapRatio = 1.5;
constexpr double kPretrainSeconds = 15 * 60;
constexpr double kSeparation = 1.0;
constexpr double kPcaCosine = 0.9999;
constexpr double kSpearman = -0.8;
constexpr double kSteerLengthFrac = 0.70;
constexpr double kPassTol = 0.02;
constexpr double kSweepSeconds = 20 * 60;
constexpr double kRlReduction = 0.30;
constexpr double kEarlyDropFrac = 0.60;
constexpr int kEarlyStep = 30;
constexpr double kRlSeconds = 30 * 60;
constexpr double kPipelineSeconds = 75 * 60;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream o;
  o.precision(prec);
  o << v;
  return o.str();
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("missing " + p.string());
  return json::parse(in);
}

double cpu_seconds(const fs::path& run, const std::string& stage) {
  return read_json(run / stage / "timing.json").at("cpu_seconds").get<double>();
}

double rel_err(double a, double b) {
  const double den = std::max(std::abs(a), std::abs(b));
  return den == 0.0 ? 0.0 : std::abs(a - b) / den;
}

model::Transformer jittered(const model::ModelConfig& cfg, std::uint64_t seed) {
  model::Transformer m(cfg, seed);
  std::mt19937_64 rng(seed ^ 0xA5A5);
  std::normal_distribution<double> d(0.0, 0.05);
  for (auto& [name, t] : m.named_parameters())
    for (auto& v : t.mutable_data()) v += d(rng);
  return m;
}

// Worst relative error of backward() against central differences over
// randomly probed scalar parameters.
double probe_gradients(model::Transformer& m, const std::function<Tensor(Graph&)>& loss, int probes,
                       std::uint64_t seed) {
  m.zero_grad();
  {
    Graph g;
    g.backward(loss(g));
  }
  auto params = m.named_parameters();
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (int k = 0; k < probes; ++k) {
    auto& t = params[rng() % params.size()].second;
    const std::size_t i = rng() % t.size();
    const double orig = t[i];
    t.mutable_data()[i] = orig + kFdStep;
    Graph gp(GraphMode::frozen);
    const double fp = loss(gp).item();
    t.mutable_data()[i] = orig - kFdStep;
    Graph gm(GraphMode::frozen);
    const double fm = loss(gm).item();
    t.mutable_data()[i] = orig;
    worst = std::max(worst, rel_err(t.grad()[i], (fp - fm) / (2 * kFdStep)));
  }
  return worst;
}

// ---- criteria --------------------------------------------------------------

Outcome c1_autodiff() {
  const auto t0 = std::chrono::steady_clock::now();
  auto m = jittered(model::ModelConfig{}, 101);
  auto rec = task::render_trace(task::make_problem({4, 7, 2, 9}, {task::Op::mul, task::Op::add, task::Op::mul}),
                                0.8, 5);
  const double worst = probe_gradients(
      m, [&](Graph& g) { return model::sequence_loss(g, m, rec); }, kFdProbes, 202);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {worst < kFdRelTol && secs < kFdSeconds,
          "max rel err " + fmt(worst) + " over " + std::to_string(kFdProbes) + " params, " + fmt(secs, 3) + " s"};
}

Outcome c2_direction_oracle() {
  std::mt19937_64 rng(303);
  std::normal_distribution<double> z(0.0, 1.0);
  double worst = 0.0;
  for (int s = 0; s < kDirectionSets; ++s) {
    steer::ContrastiveSets sets;
    const std::size_t layers = 5, d = 64, ne = 1 + rng() % 200, nv = 1 + rng() % 200;
    const double scale = std::exp(3.0 * z(rng));
    sets.efficient.resize(layers);
    sets.verbose.resize(layers);
    for (std::size_t l = 0; l < layers; ++l) {
      for (std::size_t i = 0; i < ne; ++i) {
        std::vector<double> v(d);
        for (auto& x : v) x = scale * z(rng);
        sets.efficient[l].push_back(std::move(v));
      }
      for (std::size_t i = 0; i < nv; ++i) {
        std::vector<double> v(d);
        for (auto& x : v) x = scale * z(rng) + 0.5;
        sets.verbose[l].push_back(std::move(v));
      }
    }
    const auto dir = steer::extract_direction(sets);
    for (std::size_t l = 0; l < layers; ++l) {
      const auto want = oracle::mean_difference(sets.efficient[l], sets.verbose[l]);
      for (std::size_t j = 0; j < d; ++j)
        worst = std::max(worst, std::abs(dir.v[l][j] - want[j]) / std::max(1.0, std::abs(want[j])));
    }
  }
  return {worst <= kDirectionTol, "max deviation " + fmt(worst) + " over " + std::to_string(kDirectionSets) + " sets"};
}

Outcome c3_noop(const fs::path& run) {
  const auto ck = model::Checkpoint::load((run / "pretrain" / "model.ckpt").string());
  const auto dir = steer::SteeringDirection::load((run / "extract-direction" / "direction.bin").string());
  const auto problems = task::gen_problems(25, {1, 5}, 404);
  model::SamplerConfig sc;
  std::size_t compared = 0, identical = 0;
  for (std::size_t i = 0; i < problems.size(); ++i) {
    sc.seed = task::mix_seed(405, i);
    const auto plain = model::sample(ck.model, problems[i], sc).record;
    for (int l = 1; l <= ck.model.config().n_layers; ++l) {
      const auto s = steer::steered_sample(ck.model, problems[i], sc, dir, {l, 0.0, false, false});
      ++compared;
      identical += s.response == plain.response ? 1 : 0;
    }
  }
  return {compared == identical, std::to_string(identical) + "/" + std::to_string(compared) + " identical"};
}

Outcome c4_reward() {
  std::mt19937_64 rng(505);
  std::uniform_real_distribution<double> w(0.0, 3.0);
  std::size_t mismatches = 0;
  for (int i = 0; i < kRewardTriples; ++i) {
    const rl::RewardSpec spec{w(rng), w(rng) / 100};
    task::TraceRecord r;
    r.correct = rng() % 2;
    r.length = rng() % 400;
    const double min_len = static_cast<double>(rng() % 400) + (rng() % 3 == 0 ? 0.25 : 0.0);
    if (rl::reward(r, min_len, spec) !=
        oracle::reward(r.correct, static_cast<double>(r.length), min_len, spec.lambda1, spec.lambda2))
      ++mismatches;
  }
  std::size_t groups = 0, optimal = 0;
  const rl::RewardSpec spec;
  for (int g = 0; g < 2000; ++g) {
    std::vector<task::TraceRecord> group(8);
    for (auto& r : group) {
      r.correct = rng() % 3 != 0;
      r.length = 1 + rng() % 120;
    }
    const auto mc = rl::min_correct_length(group);
    if (mc.fallback) continue;
    ++groups;
    double best = -1e300, shortest = 0;
    std::size_t shortest_len = SIZE_MAX;
    for (const auto& r : group) {
      const double v = rl::reward(r, mc.length, spec);
      best = std::max(best, v);
      if (r.correct && r.length < shortest_len) shortest_len = r.length, shortest = v;
    }
    optimal += shortest == best ? 1 : 0;
  }
  return {mismatches == 0 && optimal == groups, std::to_string(mismatches) + " mismatches in " +
                                                    std::to_string(kRewardTriples) + " triples, shortest optimal in " +
                                                    std::to_string(optimal) + "/" + std::to_string(groups) + " groups"};
}

Outcome c5_grpo() {
  model::ModelConfig cfg;
  cfg.d_model = 32;
  cfg.n_layers = 2;
  cfg.n_heads = 4;
  cfg.d_ff = 64;
  cfg.max_context = 64;
  auto m = jittered(cfg, 606);
  std::mt19937_64 rng(607);
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  rl::GrpoBatch batch;
  const auto p = task::make_problem({6, 3, 5}, {task::Op::add, task::Op::mul});
  const std::vector<std::vector<int>> responses{task::render_trace(p, 0.0, 1).response,
                                                task::render_trace(p, 1.0, 2).response};
  const double adv[] = {1.0, -1.0};
  for (std::size_t i = 0; i < 2; ++i) {
    rl::RolloutData r;
    r.id = i;
    r.prompt = p.prompt_tokens();
    r.response = responses[i];
    r.advantage = adv[i];
    for (double lp : rl::response_log_probs(m, r.prompt, r.response)) {
      r.old_logp.push_back(lp + u(rng));
      r.ref_logp.push_back(lp + 3 * u(rng));
    }
    batch.data.push_back(std::move(r));
  }
  rl::GrpoConfig gc;
  const double worst = probe_gradients(
      m, [&](Graph& g) { return rl::grpo_loss(g, m, batch, gc); }, kFdProbes, 608);

  double worst_mean = 0.0, worst_std = 0.0;
  std::normal_distribution<double> z(0.0, 1.0);
  for (int g = 0; g < 1000; ++g) {
    std::vector<double> r(8);
    for (auto& x : r) x = z(rng) * std::exp(z(rng));
    const auto a = rl::group_advantages(r);
    double mean = 0, var = 0;
    for (double x : a) mean += x / 8;
    for (double x : a) var += (x - mean) * (x - mean) / 8;
    worst_mean = std::max(worst_mean, std::abs(mean));
    worst_std = std::max(worst_std, std::abs(std::sqrt(var) - 1));
  }
  return {worst < kFdRelTol && worst_mean < kAdvantageTol && worst_std < kAdvantageTol,
          "grad rel err " + fmt(worst) + ", adv |mean| " + fmt(worst_mean) + ", |std-1| " + fmt(worst_std)};
}

Outcome c6_phenomenon(const fs::path& run) {
  const auto a = read_json(run / "analyze" / "analysis.json");
  const double ratio = a["length_gap"]["mean_ratio_d3plus"].get<double>();
  const double secs = cpu_seconds(run, "pretrain");
  const int k = read_json(run / "analyze" / "config.resolved.json")["eval"]["k"].get<int>();
  return {ratio >= kGapRatio && secs <= kPretrainSeconds && k == 8,
          "mean max/min ratio (difficulty>=3) " + fmt(ratio) + " with k=" + std::to_string(k) + ", pretrain " +
              fmt(secs, 4) + " s"};
}

Outcome c7_separation(const fs::path& run) {
  const auto cfg = pipeline::load_config((run / "analyze" / "config.resolved.json").string());
  const auto a = read_json(run / "analyze" / "analysis.json");
  const int layer = cfg.analysis.pca_layer;
  double sep = 0.0;
  for (const auto& row : a["pca"]["layers"])
    if (row["layer"] == layer) sep = row["separation"].get<double>();

  // Recompute the projection on the same snapshots and compare with Jacobi.
  const auto ck = model::Checkpoint::load((run / "pretrain" / "model.ckpt").string());
  const auto pool = task::read_jsonl((run / "extract-direction" / "rollouts.jsonl").string());
  const auto sets = steer::collect_snapshots(ck.model, pool, {cfg.steering.k_per_side, cfg.steering.scope});
  std::vector<std::vector<double>> pts;
  std::vector<bool> lab;
  for (const auto& v : sets.efficient[static_cast<std::size_t>(layer)]) pts.push_back(v), lab.push_back(true);
  for (const auto& v : sets.verbose[static_cast<std::size_t>(layer)]) pts.push_back(v), lab.push_back(false);
  const auto proj = analysis::pca_project(pts, lab);
  const auto [vals, vecs] = oracle::jacobi_eigen(oracle::covariance(pts));
  const double cos1 = oracle::abs_cosine(proj.directions[0], vecs[0]);
  const double cos2 = oracle::abs_cosine(proj.directions[1], vecs[1]);
  return {sep > kSeparation && std::min(cos1, cos2) > kPcaCosine,
          "separation " + fmt(sep) + " at layer " + std::to_string(layer) + ", eigen cosines " + fmt(cos1, 8) + " / " +
              fmt(cos2, 8)};
}

Outcome c8_markers(const fs::path& run) {
  const auto a = read_json(run / "analyze" / "analysis.json");
  double wait_s = 0, wait_l = 0;
  for (const auto& k : a["keywords"])
    if (k["keyword"] == "WAIT") wait_s = k["shortest"].get<double>(), wait_l = k["longest"].get<double>();
  const auto& ph = a["phases"];
  auto share = [](const json& b) { return b["reflection"].get<double>() + b["transition"].get<double>(); };
  const double first = share(ph.front()), last = share(ph.back());
  return {wait_s < wait_l && first < last && ph.size() >= 2,
          "WAIT per trace " + fmt(wait_s) + " vs " + fmt(wait_l) + ", R+T share " + fmt(first) + " vs " + fmt(last)};
}

Outcome c9_steering(const fs::path& run) {
  const auto s = read_json(run / "steer-sweep" / "sweep.json");
  const double base_len = s["baseline"]["mean_length"].get<double>();
  const double base_pass = s["baseline"]["pass1"].get<double>();
  const double secs = cpu_seconds(run, "steer-sweep");
  std::string detail = "baseline length " + fmt(base_len) + " pass@1 " + fmt(base_pass);
  if (s["recommended"].is_null()) return {false, detail + ", no setting within pass@1 tolerance"};
  const int layer = s["recommended"]["layer"].get<int>();
  const double lambda = s["recommended"]["lambda"].get<double>();
  double rho = 1.0;
  for (const auto& r : s["spearman"])
    if (r["layer"] == layer && !r["rho"].is_null()) rho = r["rho"].get<double>();
  double len = 0, pass = 0;
  for (const auto& r : s["rows"])
    if (r["layer"] == layer && r["lambda"] == lambda)
      len = r["summary"]["mean_length"].get<double>(), pass = r["summary"]["pass1"].get<double>();
  const double frac = len / base_len;
  const bool ok =
      rho <= kSpearman && frac <= kSteerLengthFrac && pass >= base_pass - kPassTol && secs <= kSweepSeconds;
  return {ok, detail + "; layer " + std::to_string(layer) + " lambda " + fmt(lambda) + ": spearman " + fmt(rho) +
                  ", length " + fmt(len) + " (" + fmt(100 * frac, 3) + "% of baseline), pass@1 " + fmt(pass) +
                  ", sweep " + fmt(secs, 4) + " s"};
}

Outcome c10_rl(const fs::path& run) {
  const auto r = read_json(run / "rl-train" / "rl.json");
  const double b_len = r["base"]["mean_length"].get<double>(), t_len = r["trained"]["mean_length"].get<double>();
  const double b_pass = r["base"]["pass1"].get<double>(), t_pass = r["trained"]["pass1"].get<double>();
  const double reduction = 1.0 - t_len / b_len;
  std::vector<rl::EvalPoint> curve;
  const auto duration = read_json(run / "ablate-duration" / "duration.json");
  for (const auto& e : duration["curve"]) {
    rl::EvalPoint p;
    p.step = e["step"].get<int>();
    p.summary.mean_length = e["summary"]["mean_length"].get<double>();
    curve.push_back(p);
  }
  const double early = rl::drop_fraction_by(curve, kEarlyStep);
  const double secs = cpu_seconds(run, "rl-train");
  const int steps = r["steps"].get<int>();
  const bool ok = steps == 60 && reduction >= kRlReduction && t_pass >= b_pass - kPassTol &&
                  early >= kEarlyDropFrac && secs <= kRlSeconds;
  return {ok, "length " + fmt(b_len) + " -> " + fmt(t_len) + " (-" + fmt(100 * reduction, 3) + "%), pass@1 " +
                  fmt(b_pass) + " -> " + fmt(t_pass) + ", " + fmt(100 * early, 3) + "% of drop by step " +
                  std::to_string(kEarlyStep) + ", " + std::to_string(steps) + " steps in " + fmt(secs, 4) + " s"};
}

Outcome c11_difficulty(const fs::path& run) {
  const auto d = read_json(run / "ablate-difficulty" / "difficulty.json");
  const double e_len = d["easy"]["mean_length"].get<double>(), h_len = d["hard"]["mean_length"].get<double>();
  const double e_pass = d["easy"]["pass1"].get<double>(), h_pass = d["hard"]["pass1"].get<double>();
  return {e_len < h_len && std::abs(e_pass - h_pass) <= kPassTol,
          "easy-trained length " + fmt(e_len) + " pass@1 " + fmt(e_pass) + "; hard-trained length " + fmt(h_len) +
              " pass@1 " + fmt(h_pass)};
}

int run_cli(const fs::path& cli, const std::string& args) {
  const std::string cmd = "\"" + cli.string() + "\" " + args;
  return std::system(cmd.c_str());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

Outcome c12_pipeline(const fs::path& run, const fs::path& cli, bool pipeline_ok) {
  if (!pipeline_ok) return {false, "pipeline did not complete"};
  double total = 0.0;
  for (const auto& s : pipeline::kStages) {
    if (!fs::exists(run / s / "manifest.json") || fs::exists(run / s / "FAILED.json"))
      return {false, "stage " + s + " incomplete"};
    total += cpu_seconds(run, s);
  }
  const auto report = read_json(run / "report" / "manifest.json");
  for (const auto& f : report["outputs"].items())
    if (!fs::exists(run / "report" / f.key())) return {false, "report missing " + f.key()};
  if (!fs::exists(run / "report" / "index.html")) return {false, "report index missing"};

  // Determinism: the tiny config twice from scratch, and the default
  // extract-direction stage recomputed from the same upstream artifacts.
  const auto scratch = fs::temp_directory_path() / "terse_acceptance_det";
  fs::remove_all(scratch);
  const std::string tiny = "--config \"" TERSE_SOURCE_DIR "/configs/tiny.json\" --threads 1 -q";
  bool same = run_cli(cli, tiny + " --out \"" + (scratch / "a").string() + "\" all") == 0 &&
              run_cli(cli, tiny + " --out \"" + (scratch / "b").string() + "\" all") == 0;
  for (const auto& s : pipeline::kStages)
    same = same && slurp(scratch / "a" / s / "manifest.json") == slurp(scratch / "b" / s / "manifest.json");
  fs::create_directories(scratch / "c");
  for (const char* s : {"gen-data", "pretrain"})
    fs::copy(run / s, scratch / "c" / s, fs::copy_options::recursive);
  same = same &&
         run_cli(cli, "--config \"" TERSE_SOURCE_DIR "/configs/default.json\" --threads 1 -q --out \"" +
                          (scratch / "c").string() + "\" extract-direction") == 0 &&
         slurp(scratch / "c" / "extract-direction" / "manifest.json") ==
             slurp(run / "extract-direction" / "manifest.json");
  fs::remove_all(scratch);
  return {total <= kPipelineSeconds && same,
          "9 stages in " + fmt(total / 60, 4) + " CPU min, report bundle present, deterministic reruns " +
              (same ? "identical" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path run = argc > 1 ? fs::path(argv[1]) : fs::path(TERSE_ACCEPT_RUN);
  const fs::path cli = TERSE_CLI_PATH;

  std::fprintf(stderr, "running default pipeline into %s (fresh stages are reused)\n", run.string().c_str());
  const bool pipeline_ok =
      run_cli(cli, "--config \"" TERSE_SOURCE_DIR "/configs/default.json\" --threads 1 --skip-if-fresh --out \"" +
                       run.string() + "\" all") == 0;

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"autodiff gradient check", c1_autodiff},
      {"direction equals mean-difference oracle", c2_direction_oracle},
      {"zero-coefficient steering is a no-op", [&] { return c3_noop(run); }},
      {"reward oracle and shortest-correct optimality", c4_reward},
      {"GRPO gradient check and advantage normalisation", c5_grpo},
      {"per-prompt length gap in the pretrained model", [&] { return c6_phenomenon(run); }},
      {"efficient/verbose separation in PCA", [&] { return c7_separation(run); }},
      {"reflection markers and phases grow with length", [&] { return c8_markers(run); }},
      {"steering sweep shortens traces", [&] { return c9_steering(run); }},
      {"efficiency RL shortens traces early", [&] { return c10_rl(run); }},
      {"easy-split RL beats hard-split RL on length", [&] { return c11_difficulty(run); }},
      {"end-to-end pipeline budget and determinism", [&] { return c12_pipeline(run, cli, pipeline_ok); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::printf("[%s] %2zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed\n", criteria.size() - static_cast<std::size_t>(failed), criteria.size());
  return failed == 0 ? 0 : 1;
}
