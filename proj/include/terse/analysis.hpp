#pragma once

// Diagnostics over sampled rollouts: per-prompt length gaps, reflection
// keyword counts, phase mixtures by length bucket, and a 2-D PCA view of
// final-reasoning-token representations.

#include <array>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "terse/task.hpp"

namespace terse::analysis {

using Groups = std::vector<std::vector<task::TraceRecord>>;

struct PromptGap {
  std::size_t prompt = 0;  // group index
  int difficulty = 0;
  std::size_t shortest = 0, longest = 0;
  // longest / shortest, with the denominator floored at one token.
  double ratio = 1.0;
  std::size_t k = 0, n_correct = 0;
};

struct DifficultyGap {
  int difficulty = 0;
  std::size_t prompts = 0;
  double mean_shortest = 0.0, mean_longest = 0.0, mean_ratio = 0.0;
};

struct LengthGapReport {
  std::vector<PromptGap> prompts;
  std::vector<DifficultyGap> by_difficulty;  // ascending, only present levels
  std::size_t excluded = 0;                  // prompts with < 2 correct traces

  // Mean per-prompt ratio over prompts with difficulty >= min_difficulty.
  double mean_ratio(int min_difficulty = 1) const;
};

LengthGapReport length_gap(const Groups& groups);

// Per-prompt extremes over correct traces (min-1 / max-1 per prompt in
// (length, id) order, so ties go to the lowest id for the shortest and the
// highest id for the longest); prompts with fewer than two correct traces contribute nothing.
struct ExtremeSets {
  std::vector<task::TraceRecord> shortest, longest;
};
ExtremeSets extreme_sets(const Groups& groups);

inline constexpr std::array<int, 3> kKeywords = {task::kWait, task::kAlt, task::kHow};

struct KeywordReport {
  // Mean count per trace, indexed like kKeywords.
  std::array<double, 3> shortest{}, longest{};
  std::size_t n_shortest = 0, n_longest = 0;
};

KeywordReport keyword_frequency(const std::vector<task::TraceRecord>& shortest,
                                const std::vector<task::TraceRecord>& longest);

struct PhaseBucket {
  std::size_t lo = 0, hi = 0;  // inclusive length range
  std::size_t traces = 0;
  std::array<std::size_t, 3> spans{};  // execution, reflection, transition
  std::size_t malformed = 0;
  std::array<double, 3> proportion() const;
  double reflect_transition_share() const;
};

struct PhaseReport {
  std::vector<PhaseBucket> buckets;  // nonempty buckets, shortest first
};

// Four buckets split at the length quartiles of `records`.
PhaseReport phase_distribution(const std::vector<task::TraceRecord>& records);

struct PcaProjection {
  std::vector<double> mean;
  std::array<std::vector<double>, 2> directions;
  std::array<double, 2> explained{};  // fraction of total variance
  std::vector<std::array<double, 2>> coords;
  std::vector<bool> efficient;  // label per point
};

// Fit jointly over all points (both labels pooled). Power iteration with
// deflation; each direction has its first non-negligible coordinate positive.
PcaProjection pca_project(const std::vector<std::vector<double>>& points, const std::vector<bool>& efficient);

struct Separation {
  double score = 0.0;
  bool capped = false;
};
inline constexpr double kSeparationCap = 1e6;

// |c_eff - c_verb| / s, where s is the root-mean-square distance of every
// projected point to its own class centroid.
Separation separation_score(const PcaProjection& p);

void write_length_gap_csv(const std::string& path, const LengthGapReport& r);
void write_keyword_csv(const std::string& path, const KeywordReport& r);
void write_phase_csv(const std::string& path, const PhaseReport& r);
void write_pca_csv(const std::string& path, const PcaProjection& p);

std::string length_gap_svg(const LengthGapReport& r);
std::string keyword_svg(const KeywordReport& r);
std::string phase_svg(const PhaseReport& r);
std::string pca_svg(const PcaProjection& p, int layer);

}  // namespace terse::analysis
