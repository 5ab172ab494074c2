#pragma once

// Synthetic verifiable reasoning task: mod-10 left folds over digit
// expressions, rendered as phase-marked traces with controllable verbosity.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace terse::task {

// Token ids are part of the on-disk formats; do not renumber.
enum Token : int {
  kDigit0 = 0,  // digits occupy 0..9
  kPlus = 10,
  kTimes = 11,
  kEquals = 12,
  kBos = 13,
  kEos = 14,
  kAns = 15,
  kExec = 16,        // E: Execution phase marker
  kReflect = 17,     // R: Reflection phase marker
  kTransition = 18,  // T: Transition phase marker
  kWait = 19,
  kAlt = 20,
  kHow = 21,
};
inline constexpr int kVocabSize = 22;

inline bool is_digit(int tok) { return tok >= 0 && tok <= 9; }
std::string_view token_name(int tok);
// Space-separated token names, e.g. "BOS 3 + 4 =".
std::string detokenize(std::span<const int> tokens);

enum class Op : char { add = '+', mul = '*' };

struct Problem {
  std::vector<int> operands;  // 2..6 digits
  std::vector<Op> ops;        // operands.size() - 1
  int difficulty = 1;         // operand count - 1
  int answer = 0;             // left fold, each step mod 10

  // Partial results: acc[0] = operands[0], acc[k] after step k.
  std::vector<int> partials() const;
  std::vector<int> prompt_tokens() const;
};

int apply_op(Op op, int a, int b);
Problem make_problem(std::vector<int> operands, std::vector<Op> ops);

enum class Phase { execution, reflection, transition };
std::string_view phase_name(Phase p);

// [start, end) in trace coordinates.
struct PhaseSpan {
  Phase phase = Phase::execution;
  std::size_t start = 0;
  std::size_t end = 0;
  bool operator==(const PhaseSpan&) const = default;
};

enum class Origin { synthetic, sampled };

struct SteeringTag {
  int layer = 0;
  double lambda = 0.0;
};

struct TraceRecord {
  std::uint64_t id = 0;
  Problem problem;
  std::vector<int> prompt;
  // Everything after the prompt: trace, ANS, answer, EOS when well formed.
  std::vector<int> response;
  // Reasoning tokens before ANS (the whole response minus EOS when ANS is missing).
  std::vector<int> trace;
  int answer_token = -1;
  bool correct = false;
  // False when generation ran out of budget or context before EOS.
  bool complete = true;
  // l(y): number of reasoning-trace tokens.
  std::size_t length = 0;
  std::vector<PhaseSpan> spans;
  // Leading tokens that precede any phase marker, folded into an Execution span.
  std::size_t malformed_spans = 0;
  // Index into prompt ++ response of the token right before ANS.
  std::size_t final_reasoning_position = 0;
  Origin origin = Origin::synthetic;
  double verbosity = 0.0;  // synthetic only
  std::optional<SteeringTag> steering;

  std::vector<int> full_sequence() const;
  std::size_t count(int token) const;
  std::size_t span_count(Phase p) const;
};

// ---- operations ---------------------------------------------------------

struct DifficultyRange {
  int lo = 1;
  int hi = 5;
};

std::vector<Problem> gen_problems(std::size_t count, DifficultyRange range, std::uint64_t seed);

TraceRecord render_trace(const Problem& problem, double verbosity, std::uint64_t seed);

// True iff response is `trace ANS d [EOS]` with no other ANS and d equal to
// the problem's answer. Malformed responses are incorrect, never an error.
bool verify(const Problem& problem, std::span<const int> response);

// Split a trace at phase markers. Tokens before the first marker form one
// Execution span and bump the malformed counter.
std::pair<std::vector<PhaseSpan>, std::size_t> segment_phases(std::span<const int> trace);

// Build a sampled TraceRecord from generated tokens.
TraceRecord record_from_response(const Problem& problem, std::vector<int> response, bool complete);

struct MixtureComponent {
  double verbosity = 0.0;
  double weight = 1.0;
};
using Mixture = std::vector<MixtureComponent>;
void validate_mixture(const Mixture& mixture);

struct Corpus {
  std::vector<TraceRecord> records;
  nlohmann::json manifest;
};

// One rendering per problem, verbosity drawn from the mixture.
Corpus build_corpus(const std::vector<Problem>& problems, const Mixture& mixture, std::uint64_t seed);

// ---- JSON lines ---------------------------------------------------------

nlohmann::json to_json(const TraceRecord& r);
TraceRecord trace_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Problem& p);
Problem problem_from_json(const nlohmann::json& j);

void write_jsonl(const std::string& path, std::span<const TraceRecord> records);
std::vector<TraceRecord> read_jsonl(const std::string& path);
void write_problems(const std::string& path, std::span<const Problem> problems);
std::vector<Problem> read_problems(const std::string& path);

// Deterministic per-item seed derivation.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace terse::task
