#include "terse/task.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <stdexcept>

#include "terse/tensor.hpp"

namespace terse::task {

namespace {
constexpr std::array<std::string_view, kVocabSize> kNames = {
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "*", "=", "BOS", "EOS", "ANS",
    "E", "R", "T", "WAIT", "ALT", "HOW"};

int op_token(Op op) { return op == Op::add ? kPlus : kTimes; }

double unit(std::mt19937_64& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }
}  // namespace

std::string_view token_name(int tok) {
  if (tok < 0 || tok >= kVocabSize) return "?";
  return kNames[static_cast<std::size_t>(tok)];
}

std::string detokenize(std::span<const int> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += token_name(tokens[i]);
  }
  return out;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finaliser over (seed, stream)
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

int apply_op(Op op, int a, int b) { return (op == Op::add ? a + b : a * b) % 10; }

std::vector<int> Problem::partials() const {
  std::vector<int> acc{operands.front()};
  for (std::size_t i = 0; i < ops.size(); ++i) acc.push_back(apply_op(ops[i], acc.back(), operands[i + 1]));
  return acc;
}

std::vector<int> Problem::prompt_tokens() const {
  std::vector<int> t{kBos, operands.front()};
  for (std::size_t i = 0; i < ops.size(); ++i) {
    t.push_back(op_token(ops[i]));
    t.push_back(operands[i + 1]);
  }
  t.push_back(kEquals);
  return t;
}

Problem make_problem(std::vector<int> operands, std::vector<Op> ops) {
  if (operands.size() < 2 || operands.size() > 6)
    throw ContractError("problem needs 2..6 operands, got " + std::to_string(operands.size()));
  if (ops.size() + 1 != operands.size()) throw ContractError("problem needs one op between operands");
  for (int d : operands)
    if (!is_digit(d)) throw ContractError("operand " + std::to_string(d) + " is not a digit");
  Problem p;
  p.operands = std::move(operands);
  p.ops = std::move(ops);
  p.difficulty = static_cast<int>(p.operands.size()) - 1;
  p.answer = p.partials().back();
  return p;
}

std::string_view phase_name(Phase p) {
  switch (p) {
    case Phase::execution: return "execution";
    case Phase::reflection: return "reflection";
    case Phase::transition: return "transition";
  }
  return "?";
}

std::vector<int> TraceRecord::full_sequence() const {
  std::vector<int> s = prompt;
  s.insert(s.end(), response.begin(), response.end());
  return s;
}

std::size_t TraceRecord::count(int token) const {
  return static_cast<std::size_t>(std::count(trace.begin(), trace.end(), token));
}

std::size_t TraceRecord::span_count(Phase p) const {
  return static_cast<std::size_t>(
      std::count_if(spans.begin(), spans.end(), [p](const PhaseSpan& s) { return s.phase == p; }));
}

std::vector<Problem> gen_problems(std::size_t count, DifficultyRange range, std::uint64_t seed) {
  if (range.lo < 1 || range.hi > 5 || range.lo > range.hi)
    throw ContractError("difficulty range [" + std::to_string(range.lo) + "," +
                        std::to_string(range.hi) + "] is empty or outside [1,5]");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> diff(range.lo, range.hi);
  std::uniform_int_distribution<int> digit(0, 9);
  std::uniform_int_distribution<int> coin(0, 1);
  std::vector<Problem> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int d = diff(rng);
    std::vector<int> operands;
    std::vector<Op> ops;
    operands.push_back(digit(rng));
    for (int s = 0; s < d; ++s) {
      ops.push_back(coin(rng) ? Op::mul : Op::add);
      operands.push_back(digit(rng));
    }
    out.push_back(make_problem(std::move(operands), std::move(ops)));
  }
  return out;
}

TraceRecord render_trace(const Problem& problem, double verbosity, std::uint64_t seed) {
  if (!(verbosity >= 0.0 && verbosity <= 1.0))
    throw ContractError("verbosity must lie in [0,1]");
  std::mt19937_64 rng(seed);
  const auto acc = problem.partials();
  std::vector<int> trace;
  std::vector<PhaseSpan> spans;
  auto open = [&](Phase ph) { spans.push_back({ph, trace.size(), trace.size()}); };
  auto close = [&] { spans.back().end = trace.size(); };
  auto step = [&](std::size_t k, bool swapped) {  // step k >= 1
    const int lhs = acc[k - 1], rhs = problem.operands[k];
    trace.push_back(swapped ? rhs : lhs);
    trace.push_back(op_token(problem.ops[k - 1]));
    trace.push_back(swapped ? lhs : rhs);
    trace.push_back(kEquals);
    trace.push_back(acc[k]);
  };

  const std::size_t n_steps = problem.ops.size();
  for (std::size_t k = 1; k <= n_steps; ++k) {
    open(Phase::execution);
    trace.push_back(kExec);
    step(k, false);
    close();
    if (unit(rng) < verbosity) {
      // re-verify an already computed step
      const auto j = std::uniform_int_distribution<std::size_t>(1, k)(rng);
      open(Phase::reflection);
      trace.push_back(kReflect);
      trace.push_back(kWait);
      step(j, false);
      close();
    }
    if (unit(rng) < verbosity / 2.0) {
      // redo the current step the other way round
      open(Phase::transition);
      trace.push_back(kTransition);
      trace.push_back(kHow);
      trace.push_back(kAlt);
      step(k, true);
      close();
    }
  }

  TraceRecord r;
  r.problem = problem;
  r.prompt = problem.prompt_tokens();
  r.trace = trace;
  r.response = trace;
  r.response.push_back(kAns);
  r.response.push_back(problem.answer);
  r.response.push_back(kEos);
  r.answer_token = problem.answer;
  r.correct = verify(problem, r.response);
  r.length = trace.size();
  r.spans = std::move(spans);
  r.final_reasoning_position = r.prompt.size() + trace.size() - 1;
  r.origin = Origin::synthetic;
  r.verbosity = verbosity;
  return r;
}

bool verify(const Problem& problem, std::span<const int> response) {
  std::size_t n = response.size();
  if (n > 0 && response[n - 1] == kEos) --n;
  if (n < 2) return false;
  if (response[n - 2] != kAns || !is_digit(response[n - 1])) return false;
  if (std::count(response.begin(), response.begin() + static_cast<std::ptrdiff_t>(n), kAns) != 1)
    return false;
  if (std::find(response.begin(), response.begin() + static_cast<std::ptrdiff_t>(n), kEos) !=
      response.begin() + static_cast<std::ptrdiff_t>(n))
    return false;
  return response[n - 1] == problem.answer;
}

std::pair<std::vector<PhaseSpan>, std::size_t> segment_phases(std::span<const int> trace) {
  std::vector<PhaseSpan> spans;
  std::size_t malformed = 0;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const int t = trace[i];
    std::optional<Phase> ph;
    if (t == kExec) ph = Phase::execution;
    if (t == kReflect) ph = Phase::reflection;
    if (t == kTransition) ph = Phase::transition;
    if (ph) {
      if (!spans.empty()) spans.back().end = i;
      spans.push_back({*ph, i, i});
    } else if (spans.empty()) {
      spans.push_back({Phase::execution, i, i});
      ++malformed;
    }
  }
  if (!spans.empty()) spans.back().end = trace.size();
  return {std::move(spans), malformed};
}

TraceRecord record_from_response(const Problem& problem, std::vector<int> response, bool complete) {
  TraceRecord r;
  r.problem = problem;
  r.prompt = problem.prompt_tokens();
  r.response = std::move(response);
  r.complete = complete;
  r.origin = Origin::sampled;
  const auto ans = std::find(r.response.begin(), r.response.end(), kAns);
  if (ans != r.response.end()) {
    r.trace.assign(r.response.begin(), ans);
    if (ans + 1 != r.response.end() && is_digit(*(ans + 1))) r.answer_token = *(ans + 1);
  } else {
    r.trace = r.response;
    if (!r.trace.empty() && r.trace.back() == kEos) r.trace.pop_back();
  }
  r.length = r.trace.size();
  r.correct = verify(problem, r.response);
  auto [spans, malformed] = segment_phases(r.trace);
  r.spans = std::move(spans);
  r.malformed_spans = malformed;
  r.final_reasoning_position = r.prompt.size() + r.trace.size() - 1;
  return r;
}

void validate_mixture(const Mixture& mixture) {
  if (mixture.empty()) throw ContractError("mixture is empty");
  double total = 0.0;
  for (const auto& c : mixture) {
    if (!(c.verbosity >= 0.0 && c.verbosity <= 1.0))
      throw ContractError("mixture verbosity outside [0,1]");
    if (!(c.weight >= 0.0)) throw ContractError("mixture weight negative");
    total += c.weight;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw ContractError("mixture weights sum to " + std::to_string(total) + ", expected 1");
}

Corpus build_corpus(const std::vector<Problem>& problems, const Mixture& mixture, std::uint64_t seed) {
  validate_mixture(mixture);
  Corpus c;
  std::vector<std::size_t> per_component(mixture.size(), 0);
  std::map<int, std::size_t> per_difficulty;
  for (std::size_t i = 0; i < problems.size(); ++i) {
    std::mt19937_64 pick(mix_seed(seed, 2 * i));
    const double u = unit(pick);
    std::size_t comp = mixture.size() - 1;
    double cum = 0.0;
    for (std::size_t m = 0; m < mixture.size(); ++m) {
      cum += mixture[m].weight;
      if (u < cum) {
        comp = m;
        break;
      }
    }
    TraceRecord r = render_trace(problems[i], mixture[comp].verbosity, mix_seed(seed, 2 * i + 1));
    r.id = i;
    ++per_component[comp];
    ++per_difficulty[problems[i].difficulty];
    c.records.push_back(std::move(r));
  }
  nlohmann::json mix = nlohmann::json::array();
  for (std::size_t m = 0; m < mixture.size(); ++m)
    mix.push_back({{"verbosity", mixture[m].verbosity},
                   {"weight", mixture[m].weight},
                   {"count", per_component[m]}});
  nlohmann::json diffs = nlohmann::json::object();
  for (auto [d, n] : per_difficulty) diffs[std::to_string(d)] = n;
  c.manifest = {{"seed", seed},
                {"records", c.records.size()},
                {"mixture", mix},
                {"per_difficulty", diffs}};
  return c;
}

// ---- JSON ---------------------------------------------------------------

nlohmann::json to_json(const Problem& p) {
  std::string ops;
  for (Op o : p.ops) ops.push_back(static_cast<char>(o));
  return {{"operands", p.operands}, {"ops", ops}, {"difficulty", p.difficulty}, {"answer", p.answer}};
}

Problem problem_from_json(const nlohmann::json& j) {
  std::vector<Op> ops;
  for (char c : j.at("ops").get<std::string>()) {
    if (c != '+' && c != '*') throw ContractError(std::string("unknown operator ") + c);
    ops.push_back(static_cast<Op>(c));
  }
  Problem p = make_problem(j.at("operands").get<std::vector<int>>(), std::move(ops));
  if (p.answer != j.at("answer").get<int>() || p.difficulty != j.at("difficulty").get<int>())
    throw ContractError("problem record disagrees with its recomputed answer/difficulty");
  return p;
}

nlohmann::json to_json(const TraceRecord& r) {
  nlohmann::json spans = nlohmann::json::array();
  for (const auto& s : r.spans) spans.push_back({phase_name(s.phase), s.start, s.end});
  nlohmann::json j = {{"id", r.id},
                      {"problem", to_json(r.problem)},
                      {"prompt", r.prompt},
                      {"response", r.response},
                      {"trace", r.trace},
                      {"answer_token", r.answer_token},
                      {"correct", r.correct},
                      {"complete", r.complete},
                      {"length", r.length},
                      {"spans", spans},
                      {"malformed_spans", r.malformed_spans},
                      {"final_reasoning_position", r.final_reasoning_position},
                      {"origin", r.origin == Origin::synthetic ? "synthetic" : "sampled"},
                      {"verbosity", r.verbosity}};
  if (r.steering) j["steering"] = {{"layer", r.steering->layer}, {"lambda", r.steering->lambda}};
  return j;
}

TraceRecord trace_from_json(const nlohmann::json& j) {
  TraceRecord r;
  r.id = j.at("id").get<std::uint64_t>();
  r.problem = problem_from_json(j.at("problem"));
  r.prompt = j.at("prompt").get<std::vector<int>>();
  r.response = j.at("response").get<std::vector<int>>();
  r.trace = j.at("trace").get<std::vector<int>>();
  r.answer_token = j.at("answer_token").get<int>();
  r.correct = j.at("correct").get<bool>();
  r.complete = j.at("complete").get<bool>();
  r.length = j.at("length").get<std::size_t>();
  for (const auto& s : j.at("spans")) {
    const auto name = s.at(0).get<std::string>();
    Phase ph = name == "reflection" ? Phase::reflection
               : name == "transition" ? Phase::transition
                                      : Phase::execution;
    r.spans.push_back({ph, s.at(1).get<std::size_t>(), s.at(2).get<std::size_t>()});
  }
  r.malformed_spans = j.at("malformed_spans").get<std::size_t>();
  r.final_reasoning_position = j.at("final_reasoning_position").get<std::size_t>();
  r.origin = j.at("origin").get<std::string>() == "synthetic" ? Origin::synthetic : Origin::sampled;
  r.verbosity = j.at("verbosity").get<double>();
  if (j.contains("steering"))
    r.steering = SteeringTag{j["steering"].at("layer").get<int>(), j["steering"].at("lambda").get<double>()};
  if (r.correct != verify(r.problem, r.response))
    throw ContractError("trace " + std::to_string(r.id) + ": stored correctness disagrees with verifier");
  return r;
}

void write_jsonl(const std::string& path, std::span<const TraceRecord> records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& r : records) out << to_json(r).dump() << '\n';
}

std::vector<TraceRecord> read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<TraceRecord> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(trace_from_json(nlohmann::json::parse(line)));
  return out;
}

void write_problems(const std::string& path, std::span<const Problem> problems) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& p : problems) out << to_json(p).dump() << '\n';
}

std::vector<Problem> read_problems(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<Problem> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(problem_from_json(nlohmann::json::parse(line)));
  return out;
}

}  // namespace terse::task
