#include "terse/steering.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <numeric>

#include "terse/checkpoint.hpp"
#include "terse/svg.hpp"
#include "terse/util.hpp"

namespace terse::steer {

namespace {
constexpr char kMagic[8] = {'T', 'E', 'R', 'S', 'E', 'D', 'I', 'R'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

nlohmann::json to_json(const SelectionRule& r) {
  return {{"k_per_side", r.k_per_side}, {"scope", r.scope == Scope::global ? "global" : "per_prompt"}};
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> select_traces(
    const std::vector<task::TraceRecord>& records, const SelectionRule& rule) {
  if (rule.k_per_side == 0) throw ContractError("select_traces: k_per_side must be positive");
  auto by_length_then_id = [&](std::size_t a, std::size_t b) {
    if (records[a].length != records[b].length) return records[a].length < records[b].length;
    return records[a].id < records[b].id;
  };

  std::vector<std::size_t> eff, verb;
  if (rule.scope == Scope::global) {
    std::vector<std::size_t> correct;
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].correct) correct.push_back(i);
    if (correct.size() < 2 * rule.k_per_side)
      throw InsufficientTraces("select_traces: " + std::to_string(correct.size()) + " correct traces, need " +
                                   std::to_string(2 * rule.k_per_side) + " (" + std::to_string(rule.k_per_side) +
                                   " per side)",
                               correct.size(), 2 * rule.k_per_side);
    std::sort(correct.begin(), correct.end(), by_length_then_id);
    eff.assign(correct.begin(), correct.begin() + static_cast<std::ptrdiff_t>(rule.k_per_side));
    verb.assign(correct.end() - static_cast<std::ptrdiff_t>(rule.k_per_side), correct.end());
    std::reverse(verb.begin(), verb.end());
    return {eff, verb};
  }

  // Group by prompt in order of first appearance.
  std::map<std::vector<int>, std::size_t> group_of;
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!records[i].correct) continue;
    auto [it, inserted] = group_of.try_emplace(records[i].prompt, groups.size());
    if (inserted) groups.emplace_back();
    groups[it->second].push_back(i);
  }
  for (auto& g : groups) {
    if (eff.size() == rule.k_per_side) break;
    std::sort(g.begin(), g.end(), by_length_then_id);
    if (g.size() < 2 || records[g.front()].length == records[g.back()].length) continue;
    eff.push_back(g.front());
    verb.push_back(g.back());
  }
  if (eff.size() < rule.k_per_side)
    throw InsufficientTraces("select_traces: " + std::to_string(eff.size()) +
                                 " prompts with a correct length gap, need " + std::to_string(rule.k_per_side),
                             eff.size(), rule.k_per_side);
  return {eff, verb};
}

ContrastiveSets collect_snapshots(const model::Transformer& model, const std::vector<task::TraceRecord>& records,
                                  const SelectionRule& rule, int threads) {
  const auto [eff, verb] = select_traces(records, rule);
  const auto L = static_cast<std::size_t>(model.config().n_layers);

  auto gather = [&](const std::vector<std::size_t>& picks) {
    std::vector<std::vector<std::vector<double>>> out(L + 1, std::vector<std::vector<double>>(picks.size()));
    parallel_for(picks.size(), threads, [&](std::size_t i) {
      const auto& r = records[picks[i]];
      const auto seq = r.full_sequence();
      const std::size_t pos = r.final_reasoning_position;
      if (pos >= seq.size()) throw ContractError("collect_snapshots: final reasoning position out of range");
      Graph g(GraphMode::frozen);
      model::ForwardOptions opts;
      opts.capture_residuals = true;
      const auto fr = model.forward(g, std::span<const int>(seq.data(), pos + 1), opts);
      for (auto& snap : model::snapshots_at(fr, pos))
        out[static_cast<std::size_t>(snap.layer)][i] = std::move(snap.vector);
    });
    return out;
  };

  ContrastiveSets sets;
  sets.efficient = gather(eff);
  sets.verbose = gather(verb);
  for (auto i : eff) sets.efficient_ids.push_back(records[i].id);
  for (auto i : verb) sets.verbose_ids.push_back(records[i].id);
  sets.rule = rule;
  sets.model_hash = model::model_hash(model);
  return sets;
}

namespace {
std::vector<double> mean_rows(const std::vector<std::vector<double>>& rows, std::size_t d) {
  std::vector<double> mu(d, 0.0);
  for (const auto& r : rows) {
    if (r.size() != d) throw ContractError("extract_direction: inconsistent d_model");
    for (std::size_t j = 0; j < d; ++j) mu[j] += r[j];
  }
  for (auto& x : mu) x /= static_cast<double>(rows.size());
  return mu;
}
}  // namespace

SteeringDirection extract_direction(const ContrastiveSets& sets) {
  if (sets.efficient.empty() || sets.efficient.size() != sets.verbose.size())
    throw ContractError("extract_direction: layer count mismatch or no layers");
  SteeringDirection dir;
  for (std::size_t l = 0; l < sets.efficient.size(); ++l) {
    const auto& e = sets.efficient[l];
    const auto& v = sets.verbose[l];
    if (e.empty() || v.empty()) throw ContractError("extract_direction: empty contrastive set");
    const std::size_t d = e.front().size();
    auto mu_e = mean_rows(e, d);
    auto mu_v = mean_rows(v, d);
    std::vector<double> diff(d);
    for (std::size_t j = 0; j < d; ++j) diff[j] = mu_e[j] - mu_v[j];
    dir.v.push_back(std::move(diff));
    dir.mu_efficient.push_back(std::move(mu_e));
    dir.mu_verbose.push_back(std::move(mu_v));
  }
  for (int l = 0; l <= dir.n_layers(); ++l)
    if (!std::isfinite(dir.norm(l))) throw NonFiniteError("extract_direction: non-finite direction");
  dir.manifest = {{"model_hash", sets.model_hash},
                  {"n_efficient", sets.efficient.front().size()},
                  {"n_verbose", sets.verbose.front().size()},
                  {"rule", to_json(sets.rule)}};
  return dir;
}

double SteeringDirection::norm(int layer) const {
  const auto& x = v.at(static_cast<std::size_t>(layer));
  return std::sqrt(std::inner_product(x.begin(), x.end(), x.begin(), 0.0));
}

void SteeringDirection::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  auto pod = [&](auto x) { out.write(reinterpret_cast<const char*>(&x), sizeof(x)); };
  out.write(kMagic, sizeof(kMagic));
  pod(kVersion);
  const auto m = manifest.dump();
  pod(static_cast<std::uint32_t>(m.size()));
  out.write(m.data(), static_cast<std::streamsize>(m.size()));
  pod(static_cast<std::uint32_t>(v.size()));
  pod(static_cast<std::uint32_t>(v.empty() ? 0 : v.front().size()));
  for (const auto* block : {&v, &mu_efficient, &mu_verbose})
    for (const auto& row : *block)
      out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(double)));
  if (!out) throw std::runtime_error("short write to " + path);
}

SteeringDirection SteeringDirection::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  auto fail = [&] { throw std::runtime_error("malformed direction file " + path); };
  auto pod = [&](auto& x) {
    in.read(reinterpret_cast<char*>(&x), sizeof(x));
    if (!in) fail();
  };
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) fail();
  std::uint32_t version = 0, mlen = 0, layers = 0, d = 0;
  pod(version);
  if (version != kVersion)
    throw std::runtime_error("direction format version " + std::to_string(version) + " unsupported");
  pod(mlen);
  std::string m(mlen, '\0');
  in.read(m.data(), mlen);
  if (!in) fail();
  SteeringDirection dir;
  dir.manifest = nlohmann::json::parse(m);
  pod(layers);
  pod(d);
  for (auto* block : {&dir.v, &dir.mu_efficient, &dir.mu_verbose})
    for (std::uint32_t l = 0; l < layers; ++l) {
      std::vector<double> row(d);
      in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(d * sizeof(double)));
      if (!in) fail();
      block->push_back(std::move(row));
    }
  if (in.peek() != std::char_traits<char>::eof()) fail();
  return dir;
}

std::vector<model::ResidualHook> steering_hooks(const SteeringDirection& dir, const SteeringConfig& cfg,
                                                std::size_t prompt_len) {
  if (prompt_len == 0) throw ContractError("steering_hooks: empty prompt");
  const std::size_t target = prompt_len - 1;
  const auto& v = dir.v.at(static_cast<std::size_t>(cfg.layer));
  const double lambda = cfg.lambda;
  const bool continuous = cfg.continuous;
  model::ResidualHook hook;
  hook.layer = cfg.layer;
  hook.fn = [v, lambda, target, continuous](std::size_t pos, std::span<double> row) {
    if (pos != target && !(continuous && pos > target)) return;
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += lambda * v[j];
  };
  return {hook};
}

void check_compatible(const model::Transformer& model, const SteeringDirection& dir, const SteeringConfig& cfg) {
  const int L = model.config().n_layers;
  if (cfg.layer < 1 || cfg.layer > L)
    throw ContractError("steering: layer " + std::to_string(cfg.layer) + " outside [1, " + std::to_string(L) + "]");
  if (dir.n_layers() != L || dir.v.front().size() != static_cast<std::size_t>(model.config().d_model))
    throw ContractError("steering: direction shape does not match the model");
  if (!cfg.allow_hash_mismatch && dir.model_hash() != model::model_hash(model))
    throw ContractError("steering: direction was extracted from a different checkpoint (hash " +
                        dir.model_hash().substr(0, 12) + "); pass the override flag to use it anyway");
}

task::TraceRecord steered_sample(const model::Transformer& model, const task::Problem& problem,
                                 const model::SamplerConfig& sampler, const SteeringDirection& dir,
                                 const SteeringConfig& cfg) {
  check_compatible(model, dir, cfg);
  model::SampleOptions opts;
  opts.hooks = steering_hooks(dir, cfg, problem.prompt_tokens().size());
  auto rec = model::sample(model, problem, sampler, opts).record;
  rec.steering = task::SteeringTag{cfg.layer, cfg.lambda};
  return rec;
}

const SweepRow& SweepReport::recommended() const {
  for (const auto& r : rows)
    if (r.layer == recommended_layer && r.lambda == recommended_lambda) return r;
  throw ContractError("sweep: no recommended row");
}

double SweepReport::spearman_for(int layer) const {
  for (const auto& [l, s] : spearman)
    if (l == layer) return s;
  throw ContractError("sweep: layer not in report");
}

SweepReport sweep(const model::Transformer& model, const SteeringDirection& dir, const std::vector<double>& lambdas,
                  const std::vector<int>& layers, const std::vector<task::Problem>& problems,
                  const eval::EvalSpec& spec, double tolerance, bool allow_hash_mismatch) {
  if (lambdas.empty() || layers.empty()) throw ContractError("sweep: empty grid");
  for (int l : layers) check_compatible(model, dir, SteeringConfig{l, 0.0, false, allow_hash_mismatch});

  SweepReport rep;
  rep.tolerance = tolerance;
  rep.baseline = eval::summarize(eval::sample_groups(model, problems, spec));
  for (int l : layers) {
    std::vector<double> lens;
    for (double lam : lambdas) {
      const SteeringConfig cfg{l, lam, false, true};
      auto groups = eval::sample_groups(model, problems, spec, [&](const task::Problem& p) {
        return steering_hooks(dir, cfg, p.prompt_tokens().size());
      });
      rep.rows.push_back({l, lam, eval::summarize(groups)});
      lens.push_back(rep.rows.back().summary.mean_length);
    }
    rep.spearman.emplace_back(l, lambdas.size() >= 2 ? spearman(lambdas, lens)
                                                     : std::numeric_limits<double>::quiet_NaN());
  }
  double best = std::numeric_limits<double>::infinity();
  for (const auto& r : rep.rows) {
    if (r.summary.pass1 < rep.baseline.pass1 - tolerance) continue;
    if (r.summary.mean_length < best) {
      best = r.summary.mean_length;
      rep.recommended_layer = r.layer;
      rep.recommended_lambda = r.lambda;
      rep.recommended_found = true;
    }
  }
  return rep;
}

void write_sweep_csv(const std::string& path, const SweepReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "layer,lambda,mean_length,pass1,n,mean_correct_length\n";
  for (const auto& r : report.rows)
    out << r.layer << ',' << fmt_double(r.lambda) << ',' << fmt_double(r.summary.mean_length) << ','
        << fmt_double(r.summary.pass1) << ',' << r.summary.n << ',' << fmt_double(r.summary.mean_correct_length)
        << '\n';
}

namespace {
std::string sweep_svg(const SweepReport& report, bool length) {
  std::vector<svg::Series> series;
  for (const auto& r : report.rows) {
    const std::string label = "layer " + std::to_string(r.layer);
    if (series.empty() || series.back().label != label) series.push_back({label, {}, {}});
    series.back().x.push_back(r.lambda);
    series.back().y.push_back(length ? r.summary.mean_length : r.summary.pass1);
  }
  if (!series.empty()) {
    svg::Series base{"unsteered", {series.front().x.front(), series.front().x.back()}, {}};
    const double b = length ? report.baseline.mean_length : report.baseline.pass1;
    base.y = {b, b};
    series.push_back(base);
  }
  return length ? svg::line_chart("Reasoning length vs steering strength", "lambda", "mean length", series)
                : svg::line_chart("pass@1 vs steering strength", "lambda", "pass@1", series);
}
}  // namespace

std::string sweep_svg_length(const SweepReport& report) { return sweep_svg(report, true); }
std::string sweep_svg_pass1(const SweepReport& report) { return sweep_svg(report, false); }

nlohmann::json to_json(const SweepReport& report) {
  auto summary = [](const eval::Summary& s) {
    return nlohmann::json{{"pass1", s.pass1},
                          {"mean_length", s.mean_length},
                          {"mean_correct_length", s.mean_correct_length},
                          {"n", s.n}};
  };
  nlohmann::json j{{"baseline", summary(report.baseline)}, {"tolerance", report.tolerance}};
  j["recommended"] = report.recommended_found
                         ? nlohmann::json{{"layer", report.recommended_layer}, {"lambda", report.recommended_lambda}}
                         : nlohmann::json(nullptr);
  for (const auto& [l, s] : report.spearman)
    j["spearman"].push_back({{"layer", l}, {"rho", std::isfinite(s) ? nlohmann::json(s) : nlohmann::json(nullptr)}});
  for (const auto& r : report.rows)
    j["rows"].push_back({{"layer", r.layer}, {"lambda", r.lambda}, {"summary", summary(r.summary)}});
  return j;
}

}  // namespace terse::steer
