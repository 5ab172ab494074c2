#include "terse/pipeline.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "terse/analysis.hpp"
#include "terse/checkpoint.hpp"
#include "terse/eval.hpp"
#include "terse/svg.hpp"
#include "terse/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace terse::pipeline {

// ---------------------------------------------------------------------------
// configuration

std::uint64_t ExperimentConfig::require_seed() const {
  if (!seed) throw StageError("a seed is required (--seed or \"seed\" in the config)");
  return *seed;
}

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.pretrain.epochs = 1;
  return c;
}

namespace {

json mixture_json(const task::Mixture& m) {
  json out = json::array();
  for (const auto& c : m) out.push_back({{"verbosity", c.verbosity}, {"weight", c.weight}});
  return out;
}

void check_keys(const json& j, const std::string& section, std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ContractError("config: section '" + section + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ContractError("config: unknown key '" + section + "." + key + "'");
  }
}

json taskgen_json(const TaskgenSection& t) {
  return {{"pretrain_problems", t.pretrain_problems},
          {"difficulty", {t.difficulty.lo, t.difficulty.hi}},
          {"mixture", mixture_json(t.mixture)},
          {"eval_problems", t.eval_problems},
          {"extract_problems", t.extract_problems},
          {"rl_problems", t.rl_problems},
          {"analysis_problems", t.analysis_problems}};
}

TaskgenSection taskgen_from(const json& j) {
  check_keys(j, "taskgen",
             {"pretrain_problems", "difficulty", "mixture", "eval_problems", "extract_problems", "rl_problems",
              "analysis_problems"});
  TaskgenSection t;
  t.pretrain_problems = j.at("pretrain_problems").get<std::size_t>();
  const auto d = j.at("difficulty").get<std::vector<int>>();
  if (d.size() != 2) throw ContractError("config: taskgen.difficulty must be [lo, hi]");
  t.difficulty = {d[0], d[1]};
  t.mixture.clear();
  for (const auto& c : j.at("mixture")) {
    check_keys(c, "taskgen.mixture[]", {"verbosity", "weight"});
    t.mixture.push_back({c.at("verbosity").get<double>(), c.at("weight").get<double>()});
  }
  task::validate_mixture(t.mixture);
  t.eval_problems = j.at("eval_problems").get<std::size_t>();
  t.extract_problems = j.at("extract_problems").get<std::size_t>();
  t.rl_problems = j.at("rl_problems").get<std::size_t>();
  t.analysis_problems = j.at("analysis_problems").get<std::size_t>();
  return t;
}

json steering_json(const SteeringSection& s) {
  return {{"k_per_side", s.k_per_side},
          {"scope", s.scope == steer::Scope::global ? "global" : "per_prompt"},
          {"layers", s.layers},
          {"lambdas", s.lambdas},
          {"tolerance", s.tolerance},
          {"allow_hash_mismatch", s.allow_hash_mismatch}};
}

SteeringSection steering_from(const json& j) {
  check_keys(j, "steering", {"k_per_side", "scope", "layers", "lambdas", "tolerance", "allow_hash_mismatch"});
  SteeringSection s;
  s.k_per_side = j.at("k_per_side").get<std::size_t>();
  const auto scope = j.at("scope").get<std::string>();
  if (scope == "global") s.scope = steer::Scope::global;
  else if (scope == "per_prompt") s.scope = steer::Scope::per_prompt;
  else throw ContractError("config: steering.scope must be 'global' or 'per_prompt'");
  s.layers = j.at("layers").get<std::vector<int>>();
  s.lambdas = j.at("lambdas").get<std::vector<double>>();
  s.tolerance = j.at("tolerance").get<double>();
  s.allow_hash_mismatch = j.at("allow_hash_mismatch").get<bool>();
  if (s.layers.empty() || s.lambdas.empty()) throw ContractError("config: steering grids must be nonempty");
  return s;
}

}  // namespace

json to_json(const ExperimentConfig& c) {
  json pre = model::to_json(c.pretrain);
  pre.erase("seed");
  json samp = model::to_json(c.sampler);
  samp.erase("seed");
  json j{{"model", model::to_json(c.model)},
         {"pretrain", pre},
         {"sampler", samp},
         {"taskgen", taskgen_json(c.taskgen)},
         {"eval", {{"k", c.eval.k}}},
         {"steering", steering_json(c.steering)},
         {"reward", rl::to_json(c.reward)},
         {"grpo", rl::to_json(c.grpo)},
         {"rl", {{"steps", c.rl.steps}, {"eval_every", c.rl.eval_every}}},
         {"analysis", {{"pca_layer", c.analysis.pca_layer}}}};
  j["seed"] = c.seed ? json(*c.seed) : json(nullptr);
  return j;
}

ExperimentConfig config_from_json(const json& user) {
  if (!user.is_object()) throw ContractError("config: top level must be an object");
  json merged = to_json(default_config());
  for (const auto& [key, value] : user.items()) {
    if (!merged.contains(key)) throw ContractError("config: unknown key '" + key + "'");
    if (merged[key].is_object()) {
      if (!value.is_object()) throw ContractError("config: section '" + key + "' must be an object");
      for (const auto& [k, v] : value.items()) {
        if (!merged[key].contains(k)) throw ContractError("config: unknown key '" + key + "." + k + "'");
        merged[key][k] = v;
      }
    } else {
      merged[key] = value;
    }
  }
  ExperimentConfig c;
  if (!merged["seed"].is_null()) c.seed = merged["seed"].get<std::uint64_t>();
  c.model = model::model_config_from_json(merged["model"]);
  c.model.validate();
  c.pretrain = model::pretrain_config_from_json(merged["pretrain"]);
  c.sampler = model::sampler_config_from_json(merged["sampler"]);
  c.taskgen = taskgen_from(merged["taskgen"]);
  check_keys(merged["eval"], "eval", {"k"});
  c.eval.k = merged["eval"]["k"].get<int>();
  c.steering = steering_from(merged["steering"]);
  rl::apply_json(merged["reward"], c.reward);
  rl::apply_json(merged["grpo"], c.grpo);
  check_keys(merged["rl"], "rl", {"steps", "eval_every"});
  c.rl.steps = merged["rl"]["steps"].get<int>();
  c.rl.eval_every = merged["rl"]["eval_every"].get<int>();
  check_keys(merged["analysis"], "analysis", {"pca_layer"});
  c.analysis.pca_layer = merged["analysis"]["pca_layer"].get<int>();
  if (c.eval.k <= 0) throw ContractError("config: eval.k must be positive");
  if (c.rl.steps < 0 || c.rl.eval_every < 0) throw ContractError("config: rl.steps and rl.eval_every must be >= 0");
  if (c.analysis.pca_layer < 1 || c.analysis.pca_layer > c.model.n_layers)
    throw ContractError("config: analysis.pca_layer outside [1, n_layers]");
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw StageError("cannot read config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw StageError("config " + path + ": " + e.what());
  }
  return config_from_json(j);
}

std::string config_hash(const json& j) {
  const auto s = j.dump();
  return sha256_hex(s.data(), s.size());
}

// ---------------------------------------------------------------------------
// manifests

json read_manifest(const fs::path& out, const std::string& stage) {
  const auto p = out / stage / "manifest.json";
  std::ifstream in(p);
  if (!in)
    throw StageError("missing prerequisite stage '" + stage + "' (no " + p.string() + "); run `terse " + stage +
                     "` first");
  return json::parse(in);
}

fs::path verified_input(const fs::path& out, const std::string& stage, const std::string& name) {
  const auto m = read_manifest(out, stage);
  if (!m["outputs"].contains(name))
    throw StageError("stage '" + stage + "' manifest does not list " + name);
  const auto p = out / stage / name;
  if (!fs::exists(p)) throw StageError("artifact " + p.string() + " is missing");
  const auto h = sha256_file(p.string());
  if (h != m["outputs"][name].get<std::string>())
    throw StageError("hash mismatch for artifact " + p.string() + " (recorded " +
                     m["outputs"][name].get<std::string>().substr(0, 12) + ", found " + h.substr(0, 12) + ")");
  return p;
}

namespace {

// Stage-specific seed streams.
enum SeedStream : std::uint64_t {
  kPretrainProblems = 1,
  kCorpus,
  kEvalProblems,
  kExtractProblems,
  kRlProblems,
  kAnalysisProblems,
  kPretrain,
  kExtractSampling,
  kSweepSampling,
  kRlTrain,
  kRlEval,
  kAnalysisSampling,
};

std::uint64_t seed_for(const ExperimentConfig& c, SeedStream s) { return task::mix_seed(c.require_seed(), s); }

// Config sections a stage reads. Upstream effects reach a stage through its
// input hashes, so only these enter the freshness hash.
std::vector<std::string> sections_for(const std::string& stage) {
  if (stage == "gen-data") return {"taskgen"};
  if (stage == "pretrain") return {"model", "pretrain"};
  if (stage == "extract-direction" || stage == "steer-sweep") return {"sampler", "eval", "steering"};
  if (stage == "rl-train" || stage == "ablate-duration" || stage == "ablate-difficulty")
    return {"sampler", "eval", "reward", "grpo", "rl"};
  if (stage == "analyze") return {"sampler", "eval", "steering", "analysis"};
  return {};
}

class Stage {
 public:
  Stage(std::string name, const ExperimentConfig& cfg, const RunOptions& opts)
      : name_(std::move(name)), cfg_(cfg), opts_(opts), dir_(opts.out / name_) {
    resolved_ = to_json(cfg);
    json relevant{{"seed", resolved_["seed"]}};
    for (const auto& sec : sections_for(name_)) relevant[sec] = resolved_[sec];
    hash_ = config_hash(relevant);
  }

  const fs::path& dir() const { return dir_; }
  fs::path path(const std::string& file) const { return dir_ / file; }

  // Record and verify an upstream artifact.
  fs::path input(const std::string& stage, const std::string& name) {
    auto p = verified_input(opts_.out, stage, name);
    inputs_[stage + "/" + name] = sha256_file(p.string());
    return p;
  }

  void log(const std::string& msg) const {
    if (!opts_.quiet) std::cerr << "[" << name_ << "] " << msg << std::endl;
  }

  // True when an identical earlier run can be reused.
  bool fresh() const {
    std::ifstream in(dir_ / "manifest.json");
    if (!in) return false;
    json m;
    try {
      m = json::parse(in);
    } catch (...) {
      return false;
    }
    if (m.value("config_hash", "") != hash_ || m.value("version", "") != kVersion) return false;
    for (const auto& [key, h] : m["inputs"].items()) {
      const auto slash = key.find('/');
      try {
        if (sha256_file(verified_input(opts_.out, key.substr(0, slash), key.substr(slash + 1)).string()) != h)
          return false;
      } catch (...) {
        return false;
      }
    }
    for (const auto& [file, h] : m["outputs"].items()) {
      if (!fs::exists(dir_ / file) || sha256_file((dir_ / file).string()) != h) return false;
    }
    return true;
  }

  void prepare() {
    if (fs::exists(dir_) && !fs::is_empty(dir_)) {
      if (!opts_.force)
        throw StageError("output directory " + dir_.string() +
                         " already has contents; pass --force to overwrite or --skip-if-fresh to reuse");
      fs::remove_all(dir_);
    }
    fs::create_directories(dir_);
    wall0_ = std::chrono::steady_clock::now();
    cpu0_ = std::clock();
  }

  void finish() {
    write_json("config.resolved.json", resolved_);
    json outputs = json::object();
    for (const auto& e : fs::directory_iterator(dir_)) {
      const auto f = e.path().filename().string();
      if (f == "manifest.json" || f == "timing.json" || !e.is_regular_file()) continue;
      outputs[f] = sha256_file(e.path().string());
    }
    json m{{"command", name_},
           {"config_hash", hash_},
           {"inputs", inputs_},
           {"version", kVersion},
           {"outputs", outputs},
           {"sidecars", {"timing.json"}}};
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0_).count();
    const double cpu = static_cast<double>(std::clock() - cpu0_) / CLOCKS_PER_SEC;
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    write_json("timing.json", {{"finished_utc", stamp}, {"wall_seconds", wall}, {"cpu_seconds", cpu},
                               {"threads", opts_.threads}});
    write_json("manifest.json", m);
    log("done in " + fmt_double(std::round(wall * 10) / 10) + " s");
  }

  void fail(const std::string& what) {
    try {
      write_json("FAILED.json", {{"command", name_}, {"error", what}});
    } catch (...) {
    }
  }

  void write_json(const std::string& file, const json& j) const {
    svg::write_file(path(file).string(), j.dump(2) + "\n");
  }

  const std::string& name() const { return name_; }

 private:
  std::string name_;
  const ExperimentConfig& cfg_;
  const RunOptions& opts_;
  fs::path dir_;
  json resolved_;
  std::string hash_;
  json inputs_ = json::object();
  std::chrono::steady_clock::time_point wall0_;
  std::clock_t cpu0_ = 0;
};

eval::EvalSpec eval_spec(const ExperimentConfig& c, const RunOptions& o, SeedStream s) {
  eval::EvalSpec e;
  e.sampler = c.sampler;
  e.sampler.seed = seed_for(c, s);
  e.k = c.eval.k;
  e.threads = o.threads;
  return e;
}

json summary_json(const eval::Summary& s) {
  return {{"pass1", s.pass1},
          {"mean_length", s.mean_length},
          {"mean_correct_length", s.mean_correct_length},
          {"n", s.n},
          {"n_correct", s.n_correct}};
}

std::vector<task::TraceRecord> flatten(const std::vector<std::vector<task::TraceRecord>>& groups) {
  std::vector<task::TraceRecord> out;
  for (const auto& g : groups) out.insert(out.end(), g.begin(), g.end());
  return out;
}

// ---------------------------------------------------------------------------
// stages

void gen_data(Stage& st, const ExperimentConfig& c) {
  const auto& t = c.taskgen;
  st.log("generating " + std::to_string(t.pretrain_problems) + " pretraining problems");
  const auto probs = task::gen_problems(t.pretrain_problems, t.difficulty, seed_for(c, kPretrainProblems));
  const auto corpus = task::build_corpus(probs, t.mixture, seed_for(c, kCorpus));
  task::write_jsonl(st.path("corpus.jsonl").string(), corpus.records);
  st.write_json("corpus_manifest.json", corpus.manifest);
  const std::pair<const char*, std::pair<std::size_t, SeedStream>> sets[] = {
      {"problems_eval.jsonl", {t.eval_problems, kEvalProblems}},
      {"problems_extract.jsonl", {t.extract_problems, kExtractProblems}},
      {"problems_rl.jsonl", {t.rl_problems, kRlProblems}},
      {"problems_analysis.jsonl", {t.analysis_problems, kAnalysisProblems}}};
  for (const auto& [file, spec] : sets)
    task::write_problems(st.path(file).string(), task::gen_problems(spec.first, t.difficulty, seed_for(c, spec.second)));
}

void pretrain_stage(Stage& st, const ExperimentConfig& c) {
  const auto corpus = task::read_jsonl(st.input("gen-data", "corpus.jsonl").string());
  auto pc = c.pretrain;
  pc.seed = seed_for(c, kPretrain);
  st.log("pretraining on " + std::to_string(corpus.size()) + " traces");
  const auto t0 = std::chrono::steady_clock::now();
  model::PretrainResult res;
  try {
    res = model::pretrain(corpus, c.model, pc, [&](const model::TrainLogRow& r) {
      if (r.step % 200 == 0) {
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        st.log("step " + std::to_string(r.step) + " loss " + fmt_double(std::round(r.loss * 1e4) / 1e4) + " (" +
               std::to_string(static_cast<int>(s)) + " s)");
      }
    });
  } catch (const model::TrainingDiverged& e) {
    e.last_good.save(st.path("last_good.ckpt").string());
    throw StageError(std::string(e.what()) + "; last good checkpoint saved to " + st.path("last_good.ckpt").string());
  }
  res.checkpoint.save(st.path("model.ckpt").string());
  model::write_train_log(st.path("train_log.csv").string(), res.log);
  svg::Series s{"loss", {}, {}};
  for (const auto& r : res.log) {
    s.x.push_back(static_cast<double>(r.step));
    s.y.push_back(r.loss);
  }
  svg::write_file(st.path("loss.svg").string(), svg::line_chart("Pretraining loss", "step", "loss", {s}));
}

model::Transformer load_model(Stage& st, const std::string& stage = "pretrain") {
  return model::Checkpoint::load(st.input(stage, "model.ckpt").string()).model;
}

void extract_stage(Stage& st, const ExperimentConfig& c, const RunOptions& o) {
  const auto m = load_model(st);
  const auto problems = task::read_problems(st.input("gen-data", "problems_extract.jsonl").string());
  st.log("sampling " + std::to_string(problems.size()) + " x " + std::to_string(c.eval.k) + " rollouts");
  const auto groups = eval::sample_groups(m, problems, eval_spec(c, o, kExtractSampling));
  const auto flat = flatten(groups);
  task::write_jsonl(st.path("rollouts.jsonl").string(), flat);
  const steer::SelectionRule rule{c.steering.k_per_side, c.steering.scope};
  const auto sets = steer::collect_snapshots(m, flat, rule, o.threads);
  const auto dir = steer::extract_direction(sets);
  dir.save(st.path("direction.bin").string());
  json info{{"manifest", dir.manifest},
            {"efficient_ids", sets.efficient_ids},
            {"verbose_ids", sets.verbose_ids},
            {"pool", summary_json(eval::summarize(groups))}};
  for (int l = 1; l <= dir.n_layers(); ++l) info["norms"].push_back({{"layer", l}, {"norm", dir.norm(l)}});
  st.write_json("direction.json", info);
}

void sweep_stage(Stage& st, const ExperimentConfig& c, const RunOptions& o) {
  const auto m = load_model(st);
  const auto dir = steer::SteeringDirection::load(st.input("extract-direction", "direction.bin").string());
  const auto problems = task::read_problems(st.input("gen-data", "problems_eval.jsonl").string());
  st.log("sweeping " + std::to_string(c.steering.layers.size()) + " layers x " +
         std::to_string(c.steering.lambdas.size()) + " lambdas");
  const auto rep = steer::sweep(m, dir, c.steering.lambdas, c.steering.layers, problems,
                                eval_spec(c, o, kSweepSampling), c.steering.tolerance, c.steering.allow_hash_mismatch);
  steer::write_sweep_csv(st.path("sweep.csv").string(), rep);
  st.write_json("sweep.json", steer::to_json(rep));
  svg::write_file(st.path("sweep_length.svg").string(), steer::sweep_svg_length(rep));
  svg::write_file(st.path("sweep_pass1.svg").string(), steer::sweep_svg_pass1(rep));
}

rl::TrainOptions rl_options(const ExperimentConfig& c, const RunOptions& o, Stage& st, int eval_every) {
  rl::TrainOptions t;
  t.steps = c.rl.steps;
  t.seed = seed_for(c, kRlTrain);
  t.threads = o.threads;
  t.eval_every = eval_every;
  t.eval_problems = task::read_problems(st.input("gen-data", "problems_eval.jsonl").string());
  t.eval_spec = eval_spec(c, o, kRlEval);
  t.on_step = [&st](const rl::StepLog& r) {
    if (r.step % 10 == 0)
      st.log("step " + std::to_string(r.step) + " reward " + fmt_double(std::round(r.mean_reward * 1e3) / 1e3) +
             " length " + fmt_double(std::round(r.mean_length * 100) / 100));
  };
  return t;
}

void rl_stage(Stage& st, const ExperimentConfig& c, const RunOptions& o) {
  const auto init = model::Checkpoint::load(st.input("pretrain", "model.ckpt").string());
  const auto problems = task::read_problems(st.input("gen-data", "problems_rl.jsonl").string());
  const auto res = rl::train(init, problems, c.reward, c.grpo, rl_options(c, o, st, 0));
  res.checkpoint.save(st.path("model.ckpt").string());
  rl::write_log_csv(st.path("log.csv").string(), res.log);
  rl::write_eval_csv(st.path("eval.csv").string(), res.evals);
  st.write_json("rl.json", {{"base", summary_json(res.evals.front().summary)},
                            {"trained", summary_json(res.evals.back().summary)},
                            {"steps", c.rl.steps}});
  std::vector<svg::Series> series(2);
  series[0].label = "train rollout length";
  series[1].label = "reward x 10";
  for (const auto& r : res.log) {
    series[0].x.push_back(r.step);
    series[0].y.push_back(r.mean_length);
    series[1].x.push_back(r.step);
    series[1].y.push_back(10 * r.mean_reward);
  }
  svg::write_file(st.path("log.svg").string(), svg::line_chart("RL training", "step", "value", series));
}

void duration_stage(Stage& st, const ExperimentConfig& c, const RunOptions& o) {
  const auto init = model::Checkpoint::load(st.input("pretrain", "model.ckpt").string());
  const auto problems = task::read_problems(st.input("gen-data", "problems_rl.jsonl").string());
  auto opts = rl_options(c, o, st, c.rl.eval_every);
  opts.on_eval = [&st](int step, const model::Transformer& m) {
    model::Checkpoint ck;
    ck.model = m.deep_copy();
    ck.step = static_cast<std::uint64_t>(step);
    ck.save(st.path("model_step" + std::to_string(step) + ".ckpt").string());
  };
  const auto res = rl::train(init, problems, c.reward, c.grpo, opts);
  rl::write_log_csv(st.path("log.csv").string(), res.log);
  rl::write_eval_csv(st.path("curve.csv").string(), res.evals);
  svg::write_file(st.path("curve_length.svg").string(), rl::duration_svg_length(res.evals));
  svg::write_file(st.path("curve_pass1.svg").string(), rl::duration_svg_pass1(res.evals));
  json curve = json::array();
  for (const auto& e : res.evals) curve.push_back({{"step", e.step}, {"summary", summary_json(e.summary)}});
  st.write_json("duration.json", {{"curve", curve}});
}

void difficulty_stage(Stage& st, const ExperimentConfig& c, const RunOptions& o) {
  const auto init = model::Checkpoint::load(st.input("pretrain", "model.ckpt").string());
  const auto problems = task::read_problems(st.input("gen-data", "problems_rl.jsonl").string());
  const auto a = rl::ablation_difficulty(init, problems, c.reward, c.grpo, rl_options(c, o, st, 0));
  rl::write_difficulty_csv(st.path("difficulty.csv").string(), a);
  svg::write_file(st.path("difficulty.svg").string(), rl::difficulty_svg(a));
  st.write_json("difficulty.json", {{"base", summary_json(a.easy.evals.front().summary)},
                                    {"easy", summary_json(a.easy_eval)},
                                    {"hard", summary_json(a.hard_eval)}});
}

void analyze_stage(Stage& st, const ExperimentConfig& c, const RunOptions& o) {
  const auto m = load_model(st);
  const auto problems = task::read_problems(st.input("gen-data", "problems_analysis.jsonl").string());
  st.log("sampling " + std::to_string(problems.size()) + " x " + std::to_string(c.eval.k) + " rollouts");
  const auto groups = eval::sample_groups(m, problems, eval_spec(c, o, kAnalysisSampling));
  task::write_jsonl(st.path("rollouts.jsonl").string(), flatten(groups));

  const auto gap = analysis::length_gap(groups);
  analysis::write_length_gap_csv(st.path("length_gap.csv").string(), gap);
  svg::write_file(st.path("length_gap.svg").string(), analysis::length_gap_svg(gap));

  const auto ext = analysis::extreme_sets(groups);
  const auto kw = analysis::keyword_frequency(ext.shortest, ext.longest);
  analysis::write_keyword_csv(st.path("keywords.csv").string(), kw);
  svg::write_file(st.path("keywords.svg").string(), analysis::keyword_svg(kw));

  std::vector<task::TraceRecord> correct;
  for (const auto& r : flatten(groups))
    if (r.correct) correct.push_back(r);
  const auto phases = analysis::phase_distribution(correct);
  analysis::write_phase_csv(st.path("phases.csv").string(), phases);
  svg::write_file(st.path("phases.svg").string(), analysis::phase_svg(phases));

  // PCA over the same contrastive selection the direction was built from.
  const auto pool = task::read_jsonl(st.input("extract-direction", "rollouts.jsonl").string());
  const auto sets =
      steer::collect_snapshots(m, pool, steer::SelectionRule{c.steering.k_per_side, c.steering.scope}, o.threads);
  json pca_layers = json::array();
  for (int l = 1; l <= c.model.n_layers; ++l) {
    std::vector<std::vector<double>> pts;
    std::vector<bool> lab;
    for (const auto& v : sets.efficient[static_cast<std::size_t>(l)]) pts.push_back(v), lab.push_back(true);
    for (const auto& v : sets.verbose[static_cast<std::size_t>(l)]) pts.push_back(v), lab.push_back(false);
    const auto p = analysis::pca_project(pts, lab);
    const auto sep = analysis::separation_score(p);
    pca_layers.push_back({{"layer", l},
                          {"separation", sep.score},
                          {"capped", sep.capped},
                          {"explained", {p.explained[0], p.explained[1]}}});
    if (l == c.analysis.pca_layer) {
      analysis::write_pca_csv(st.path("pca.csv").string(), p);
      svg::write_file(st.path("pca.svg").string(), analysis::pca_svg(p, l));
    }
  }

  json by_d = json::array();
  for (const auto& d : gap.by_difficulty)
    by_d.push_back({{"difficulty", d.difficulty},
                    {"prompts", d.prompts},
                    {"mean_shortest", d.mean_shortest},
                    {"mean_longest", d.mean_longest},
                    {"mean_ratio", d.mean_ratio}});
  json kw_json = json::array();
  for (std::size_t k = 0; k < analysis::kKeywords.size(); ++k)
    kw_json.push_back({{"keyword", task::token_name(analysis::kKeywords[k])},
                       {"shortest", kw.shortest[k]},
                       {"longest", kw.longest[k]}});
  json ph = json::array();
  for (const auto& b : phases.buckets) {
    const auto p = b.proportion();
    ph.push_back({{"length_lo", b.lo},
                  {"length_hi", b.hi},
                  {"traces", b.traces},
                  {"execution", p[0]},
                  {"reflection", p[1]},
                  {"transition", p[2]},
                  {"malformed", b.malformed}});
  }
  st.write_json("analysis.json", {{"summary", summary_json(eval::summarize(groups))},
                                  {"length_gap", {{"by_difficulty", by_d},
                                                  {"excluded", gap.excluded},
                                                  {"mean_ratio_d3plus", gap.mean_ratio(3)}}},
                                  {"keywords", kw_json},
                                  {"phases", ph},
                                  {"pca", {{"layer", c.analysis.pca_layer}, {"layers", pca_layers}}}});
}

// ---------------------------------------------------------------------------
// report

std::string html_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    if (ch == '<') out += "&lt;";
    else if (ch == '>') out += "&gt;";
    else if (ch == '&') out += "&amp;";
    else out += ch;
  }
  return out;
}

std::string pct(double v) {
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(1);
  o << 100.0 * v;
  return o.str();
}

std::string num(double v, int prec = 2) {
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(prec);
  o << v;
  return o.str();
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::string html() const {
    std::string s = "<table><tr>";
    for (const auto& h : header) s += "<th>" + html_escape(h) + "</th>";
    s += "</tr>\n";
    for (const auto& r : rows) {
      s += "<tr>";
      for (const auto& c : r) s += "<td>" + html_escape(c) + "</td>";
      s += "</tr>\n";
    }
    return s + "</table>\n";
  }
  std::string csv() const {
    std::string s;
    for (std::size_t i = 0; i < header.size(); ++i) s += (i ? "," : "") + header[i];
    s += "\n";
    for (const auto& r : rows) {
      for (std::size_t i = 0; i < r.size(); ++i) s += (i ? "," : "") + r[i];
      s += "\n";
    }
    return s;
  }
};

std::optional<json> try_read(const fs::path& p) {
  std::ifstream in(p);
  if (!in) return std::nullopt;
  return json::parse(in);
}

void report_stage(Stage& st, const RunOptions& o) {
  const std::vector<std::string> sources = {"pretrain",        "extract-direction", "steer-sweep", "rl-train",
                                            "ablate-duration", "ablate-difficulty", "analyze"};
  std::vector<std::string> present;
  for (const auto& s : sources)
    if (fs::exists(o.out / s / "manifest.json")) present.push_back(s);
  if (std::find(present.begin(), present.end(), "analyze") == present.end() &&
      std::find(present.begin(), present.end(), "steer-sweep") == present.end() &&
      std::find(present.begin(), present.end(), "rl-train") == present.end())
    throw StageError("report: no analysis artifacts under " + o.out.string() + " (run analyze, steer-sweep or rl-train)");

  // Copy every CSV/SVG, verifying hashes on the way.
  std::vector<std::string> images;
  for (const auto& s : present) {
    const auto m = read_manifest(o.out, s);
    for (const auto& [file, h] : m["outputs"].items()) {
      const auto ext = fs::path(file).extension().string();
      if (ext != ".csv" && ext != ".svg") continue;
      const auto src = st.input(s, file);
      const auto dst = s + "__" + file;
      fs::copy_file(src, st.path(dst), fs::copy_options::overwrite_existing);
      if (ext == ".svg") images.push_back(dst);
    }
  }

  std::string body;
  if (auto sw = try_read(o.out / "steer-sweep" / "sweep.json")) {
    const auto& j = *sw;
    Table t{{"condition", "pass1_pct", "length"}, {}};
    t.rows.push_back({"unsteered", pct(j["baseline"]["pass1"]), num(j["baseline"]["mean_length"])});
    if (!j["recommended"].is_null()) {
      for (const auto& r : j["rows"])
        if (r["layer"] == j["recommended"]["layer"] && r["lambda"] == j["recommended"]["lambda"])
          t.rows.push_back({"steered (layer " + std::to_string(r["layer"].get<int>()) + ", lambda " +
                                num(r["lambda"].get<double>(), 3) + ")",
                            pct(r["summary"]["pass1"]), num(r["summary"]["mean_length"])});
    }
    svg::write_file(st.path("table_steering.csv").string(), t.csv());
    body += "<h2>Activation steering</h2>\n" + t.html();
  }
  if (auto rj = try_read(o.out / "rl-train" / "rl.json")) {
    Table t{{"model", "pass1_pct", "length"}, {}};
    t.rows.push_back({"pretrained", pct((*rj)["base"]["pass1"]), num((*rj)["base"]["mean_length"])});
    t.rows.push_back({"efficiency RL (" + std::to_string((*rj)["steps"].get<int>()) + " steps)",
                      pct((*rj)["trained"]["pass1"]), num((*rj)["trained"]["mean_length"])});
    svg::write_file(st.path("table_rl.csv").string(), t.csv());
    body += "<h2>Self-rewarded efficiency RL</h2>\n" + t.html();
  }
  if (auto dj = try_read(o.out / "ablate-difficulty" / "difficulty.json")) {
    Table t{{"training split", "pass1_pct", "length"}, {}};
    for (const auto* k : {"base", "easy", "hard"})
      t.rows.push_back({k, pct((*dj)[k]["pass1"]), num((*dj)[k]["mean_length"])});
    svg::write_file(st.path("table_difficulty.csv").string(), t.csv());
    body += "<h2>Training data difficulty</h2>\n" + t.html();
  }
  if (auto du = try_read(o.out / "ablate-duration" / "duration.json")) {
    Table t{{"step", "pass1_pct", "length"}, {}};
    for (const auto& e : (*du)["curve"])
      t.rows.push_back({std::to_string(e["step"].get<int>()), pct(e["summary"]["pass1"]),
                        num(e["summary"]["mean_length"])});
    body += "<h2>Training duration</h2>\n" + t.html();
  }
  if (auto aj = try_read(o.out / "analyze" / "analysis.json")) {
    const auto& j = *aj;
    Table gap{{"difficulty", "prompts", "shortest", "longest", "ratio"}, {}};
    for (const auto& d : j["length_gap"]["by_difficulty"])
      gap.rows.push_back({std::to_string(d["difficulty"].get<int>()), std::to_string(d["prompts"].get<int>()),
                          num(d["mean_shortest"]), num(d["mean_longest"]), num(d["mean_ratio"])});
    Table kw{{"keyword", "shortest set", "longest set"}, {}};
    for (const auto& k : j["keywords"])
      kw.rows.push_back({k["keyword"].get<std::string>(), num(k["shortest"], 3), num(k["longest"], 3)});
    Table pc{{"layer", "separation", "explained_1", "explained_2"}, {}};
    for (const auto& l : j["pca"]["layers"])
      pc.rows.push_back({std::to_string(l["layer"].get<int>()), num(l["separation"], 3), num(l["explained"][0], 3),
                         num(l["explained"][1], 3)});
    body += "<h2>Length gap</h2>\n" + gap.html() + "<h2>Reflection keywords</h2>\n" + kw.html() +
            "<h2>Representation separation</h2>\n" + pc.html();
  }
  body += "<h2>Figures</h2>\n";
  for (const auto& img : images) body += "<p>" + html_escape(img) + "<br><img src=\"" + img + "\"></p>\n";
  const std::string page = "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>terse report</title>\n"
                           "<style>body{font-family:sans-serif;max-width:900px;margin:auto}"
                           "table{border-collapse:collapse}td,th{border:1px solid #999;padding:3px 8px}</style>\n"
                           "</head><body>\n<h1>terse report</h1>\n" +
                           body + "</body></html>\n";
  svg::write_file(st.path("index.html").string(), page);
}

}  // namespace

StageStatus run_stage(const std::string& stage, const ExperimentConfig& cfg, const RunOptions& opts) {
  if (std::find(kStages.begin(), kStages.end(), stage) == kStages.end())
    throw StageError("unknown stage '" + stage + "'");
  cfg.require_seed();
  Stage st(stage, cfg, opts);
  if (opts.skip_if_fresh && st.fresh()) {
    st.log("up to date, skipped");
    return StageStatus::skipped;
  }
  st.prepare();
  try {
    if (stage == "gen-data") gen_data(st, cfg);
    else if (stage == "pretrain") pretrain_stage(st, cfg);
    else if (stage == "extract-direction") extract_stage(st, cfg, opts);
    else if (stage == "steer-sweep") sweep_stage(st, cfg, opts);
    else if (stage == "rl-train") rl_stage(st, cfg, opts);
    else if (stage == "ablate-duration") duration_stage(st, cfg, opts);
    else if (stage == "ablate-difficulty") difficulty_stage(st, cfg, opts);
    else if (stage == "analyze") analyze_stage(st, cfg, opts);
    else report_stage(st, opts);
    st.finish();
  } catch (const std::exception& e) {
    st.fail(e.what());
    throw;
  }
  return StageStatus::ran;
}

}  // namespace terse::pipeline
