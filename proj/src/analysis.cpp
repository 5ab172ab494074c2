#include "terse/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>

#include "terse/svg.hpp"
#include "terse/tensor.hpp"
#include "terse/util.hpp"

namespace terse::analysis {

namespace {

std::vector<const task::TraceRecord*> sorted_correct(const std::vector<task::TraceRecord>& g) {
  std::vector<const task::TraceRecord*> out;
  for (const auto& r : g)
    if (r.correct) out.push_back(&r);
  std::sort(out.begin(), out.end(), [](auto* a, auto* b) {
    if (a->length != b->length) return a->length < b->length;
    return a->id < b->id;
  });
  return out;
}

std::ofstream open_csv(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  return out;
}

}  // namespace

LengthGapReport length_gap(const Groups& groups) {
  LengthGapReport rep;
  std::map<int, std::vector<const PromptGap*>> by_d;
  for (std::size_t p = 0; p < groups.size(); ++p) {
    const auto c = sorted_correct(groups[p]);
    if (c.size() < 2) {
      ++rep.excluded;
      continue;
    }
    PromptGap g;
    g.prompt = p;
    g.difficulty = c.front()->problem.difficulty;
    g.shortest = c.front()->length;
    g.longest = c.back()->length;
    g.ratio = static_cast<double>(g.longest) / static_cast<double>(std::max<std::size_t>(g.shortest, 1));
    g.k = groups[p].size();
    g.n_correct = c.size();
    rep.prompts.push_back(g);
  }
  for (const auto& g : rep.prompts) by_d[g.difficulty].push_back(&g);
  for (const auto& [d, gs] : by_d) {
    DifficultyGap a;
    a.difficulty = d;
    a.prompts = gs.size();
    for (const auto* g : gs) {
      a.mean_shortest += static_cast<double>(g->shortest);
      a.mean_longest += static_cast<double>(g->longest);
      a.mean_ratio += g->ratio;
    }
    const double n = static_cast<double>(gs.size());
    a.mean_shortest /= n;
    a.mean_longest /= n;
    a.mean_ratio /= n;
    rep.by_difficulty.push_back(a);
  }
  return rep;
}

double LengthGapReport::mean_ratio(int min_difficulty) const {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& g : prompts)
    if (g.difficulty >= min_difficulty) {
      s += g.ratio;
      ++n;
    }
  return n ? s / static_cast<double>(n) : std::nan("");
}

ExtremeSets extreme_sets(const Groups& groups) {
  ExtremeSets out;
  for (const auto& g : groups) {
    const auto c = sorted_correct(g);
    if (c.size() < 2) continue;
    out.shortest.push_back(*c.front());
    out.longest.push_back(*c.back());
  }
  return out;
}

KeywordReport keyword_frequency(const std::vector<task::TraceRecord>& shortest,
                                const std::vector<task::TraceRecord>& longest) {
  KeywordReport rep;
  auto fill = [](const std::vector<task::TraceRecord>& set, std::array<double, 3>& out) {
    for (std::size_t k = 0; k < kKeywords.size(); ++k) {
      double total = 0.0;
      for (const auto& r : set) total += static_cast<double>(r.count(kKeywords[k]));
      out[k] = set.empty() ? 0.0 : total / static_cast<double>(set.size());
    }
  };
  fill(shortest, rep.shortest);
  fill(longest, rep.longest);
  rep.n_shortest = shortest.size();
  rep.n_longest = longest.size();
  return rep;
}

std::array<double, 3> PhaseBucket::proportion() const {
  const double total = static_cast<double>(spans[0] + spans[1] + spans[2]);
  std::array<double, 3> p{};
  if (total == 0.0) return p;
  for (int i = 0; i < 3; ++i) p[static_cast<std::size_t>(i)] = static_cast<double>(spans[static_cast<std::size_t>(i)]) / total;
  return p;
}

double PhaseBucket::reflect_transition_share() const {
  const auto p = proportion();
  return p[1] + p[2];
}

PhaseReport phase_distribution(const std::vector<task::TraceRecord>& records) {
  PhaseReport rep;
  if (records.empty()) return rep;
  std::vector<std::size_t> lengths;
  for (const auto& r : records) lengths.push_back(r.length);
  std::sort(lengths.begin(), lengths.end());
  // Nearest-rank quartiles.
  auto quantile = [&](double q) {
    const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(lengths.size())));
    return lengths[std::max<std::size_t>(rank, 1) - 1];
  };
  const std::array<std::size_t, 3> cut = {quantile(0.25), quantile(0.5), quantile(0.75)};
  std::array<PhaseBucket, 4> b{};
  b[0].lo = lengths.front();
  b[0].hi = cut[0];
  for (std::size_t i = 1; i < 3; ++i) b[i].lo = cut[i - 1] + 1, b[i].hi = cut[i];
  b[3].lo = cut[2] + 1;
  b[3].hi = lengths.back();
  for (const auto& r : records) {
    std::size_t k = 0;
    while (k < 3 && r.length > cut[k]) ++k;
    auto& bucket = b[k];
    ++bucket.traces;
    bucket.malformed += r.malformed_spans;
    for (const auto& s : r.spans) ++bucket.spans[static_cast<std::size_t>(s.phase)];
  }
  for (const auto& bucket : b)
    if (bucket.traces > 0 && bucket.spans[0] + bucket.spans[1] + bucket.spans[2] > 0) rep.buckets.push_back(bucket);
  return rep;
}

namespace {

using Mat = std::vector<double>;  // d x d row-major

std::vector<double> matvec(const Mat& c, const std::vector<double>& v) {
  const std::size_t d = v.size();
  std::vector<double> out(d, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i] += c[i * d + j] * v[j];
  return out;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

void normalise(std::vector<double>& v) {
  const double n = std::sqrt(dot(v, v));
  for (auto& x : v) x /= n;
}

void fix_sign(std::vector<double>& v) {
  const double n = std::sqrt(dot(v, v));
  for (double x : v)
    if (std::abs(x) > 1e-12 * n) {
      if (x < 0)
        for (auto& y : v) y = -y;
      return;
    }
}

// Unit vector orthogonal to `against`, starting from the axis with the
// largest diagonal entry not already used.
std::vector<double> start_vector(const Mat& c, std::size_t d, const std::vector<double>* against) {
  std::vector<std::size_t> axes(d);
  std::iota(axes.begin(), axes.end(), 0);
  std::stable_sort(axes.begin(), axes.end(), [&](auto a, auto b) { return c[a * d + a] > c[b * d + b]; });
  for (auto a : axes) {
    std::vector<double> v(d, 0.0);
    v[a] = 1.0;
    // A small deterministic spread avoids starting exactly orthogonal to
    // the leading eigenvector.
    for (std::size_t j = 0; j < d; ++j) v[j] += 1e-3 / static_cast<double>(j + 2);
    if (against) {
      const double p = dot(v, *against);
      for (std::size_t j = 0; j < d; ++j) v[j] -= p * (*against)[j];
    }
    if (dot(v, v) > 1e-12) {
      normalise(v);
      return v;
    }
  }
  throw ContractError("pca: cannot build a start vector");
}

std::pair<std::vector<double>, double> leading_eigen(const Mat& c, std::size_t d, double scale,
                                                     const std::vector<double>* against) {
  constexpr double kTol = 1e-10;
  constexpr int kMaxIter = 10000;
  auto v = start_vector(c, d, against);
  double residual = 0.0;
  for (int it = 0; it < kMaxIter; ++it) {
    auto w = matvec(c, v);
    if (against) {
      const double p = dot(w, *against);
      for (std::size_t j = 0; j < d; ++j) w[j] -= p * (*against)[j];
    }
    const double lambda = dot(v, w);
    residual = 0.0;
    for (std::size_t j = 0; j < d; ++j) residual += (w[j] - lambda * v[j]) * (w[j] - lambda * v[j]);
    residual = std::sqrt(residual);
    if (residual <= kTol * scale) return {v, std::max(lambda, 0.0)};
    const double n = std::sqrt(dot(w, w));
    if (n <= kTol * scale) return {v, 0.0};  // remaining variance is zero
    for (std::size_t j = 0; j < d; ++j) v[j] = w[j] / n;
  }
  throw std::runtime_error("pca: power iteration did not converge (residual " + std::to_string(residual) + ")");
}

}  // namespace

PcaProjection pca_project(const std::vector<std::vector<double>>& points, const std::vector<bool>& efficient) {
  if (points.size() < 3) throw ContractError("pca_project: need at least 3 points");
  if (efficient.size() != points.size()) throw ContractError("pca_project: one label per point required");
  const std::size_t d = points.front().size(), n = points.size();
  if (d < 2) throw ContractError("pca_project: need at least 2 dimensions");
  PcaProjection p;
  p.mean.assign(d, 0.0);
  for (const auto& x : points) {
    if (x.size() != d) throw ContractError("pca_project: inconsistent dimension");
    for (std::size_t j = 0; j < d; ++j) p.mean[j] += x[j];
  }
  for (auto& m : p.mean) m /= static_cast<double>(n);

  Mat c(d * d, 0.0);
  std::vector<double> centred(d);
  for (const auto& x : points) {
    for (std::size_t j = 0; j < d; ++j) centred[j] = x[j] - p.mean[j];
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) c[i * d + j] += centred[i] * centred[j];
  }
  for (auto& x : c) x /= static_cast<double>(n);
  double trace = 0.0;
  for (std::size_t i = 0; i < d; ++i) trace += c[i * d + i];
  const double scale = std::max(trace, 1e-300);

  auto [u1, l1] = leading_eigen(c, d, scale, nullptr);
  fix_sign(u1);
  Mat c2 = c;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) c2[i * d + j] -= l1 * u1[i] * u1[j];
  auto [u2, l2] = leading_eigen(c2, d, scale, &u1);
  fix_sign(u2);

  p.directions = {u1, u2};
  p.explained = {trace > 0 ? l1 / trace : 0.0, trace > 0 ? std::min(l2, l1) / trace : 0.0};
  p.efficient = efficient;
  for (const auto& x : points) {
    for (std::size_t j = 0; j < d; ++j) centred[j] = x[j] - p.mean[j];
    p.coords.push_back({dot(centred, u1), dot(centred, u2)});
  }
  return p;
}

Separation separation_score(const PcaProjection& p) {
  std::array<double, 2> ce{}, cv{};
  std::size_t ne = 0, nv = 0;
  for (std::size_t i = 0; i < p.coords.size(); ++i) {
    auto& c = p.efficient[i] ? ce : cv;
    (p.efficient[i] ? ne : nv)++;
    c[0] += p.coords[i][0];
    c[1] += p.coords[i][1];
  }
  if (ne == 0 || nv == 0) throw ContractError("separation_score: both labels must be present");
  for (auto& x : ce) x /= static_cast<double>(ne);
  for (auto& x : cv) x /= static_cast<double>(nv);
  double ss = 0.0;
  for (std::size_t i = 0; i < p.coords.size(); ++i) {
    const auto& c = p.efficient[i] ? ce : cv;
    ss += (p.coords[i][0] - c[0]) * (p.coords[i][0] - c[0]) + (p.coords[i][1] - c[1]) * (p.coords[i][1] - c[1]);
  }
  const double spread = std::sqrt(ss / static_cast<double>(p.coords.size()));
  const double dist = std::hypot(ce[0] - cv[0], ce[1] - cv[1]);
  Separation s;
  if (spread <= 1e-12 * std::max(1.0, dist)) {
    if (dist <= 1e-12) return s;
    s.score = kSeparationCap;
    s.capped = true;
    return s;
  }
  s.score = std::min(dist / spread, kSeparationCap);
  s.capped = s.score == kSeparationCap;
  return s;
}

void write_length_gap_csv(const std::string& path, const LengthGapReport& r) {
  auto out = open_csv(path);
  out << "prompt,difficulty,shortest,longest,ratio,k,n_correct\n";
  for (const auto& g : r.prompts)
    out << g.prompt << ',' << g.difficulty << ',' << g.shortest << ',' << g.longest << ',' << fmt_double(g.ratio)
        << ',' << g.k << ',' << g.n_correct << '\n';
}

void write_keyword_csv(const std::string& path, const KeywordReport& r) {
  auto out = open_csv(path);
  out << "keyword,shortest_mean,longest_mean,n_shortest,n_longest\n";
  for (std::size_t k = 0; k < kKeywords.size(); ++k)
    out << task::token_name(kKeywords[k]) << ',' << fmt_double(r.shortest[k]) << ',' << fmt_double(r.longest[k])
        << ',' << r.n_shortest << ',' << r.n_longest << '\n';
}

void write_phase_csv(const std::string& path, const PhaseReport& r) {
  auto out = open_csv(path);
  out << "bucket,length_lo,length_hi,traces,execution,reflection,transition,malformed,"
         "execution_share,reflection_share,transition_share\n";
  for (std::size_t i = 0; i < r.buckets.size(); ++i) {
    const auto& b = r.buckets[i];
    const auto p = b.proportion();
    out << i << ',' << b.lo << ',' << b.hi << ',' << b.traces << ',' << b.spans[0] << ',' << b.spans[1] << ','
        << b.spans[2] << ',' << b.malformed << ',' << fmt_double(p[0]) << ',' << fmt_double(p[1]) << ','
        << fmt_double(p[2]) << '\n';
  }
}

void write_pca_csv(const std::string& path, const PcaProjection& p) {
  auto out = open_csv(path);
  out << "label,pc1,pc2\n";
  for (std::size_t i = 0; i < p.coords.size(); ++i)
    out << (p.efficient[i] ? "efficient" : "verbose") << ',' << fmt_double(p.coords[i][0]) << ','
        << fmt_double(p.coords[i][1]) << '\n';
}

std::string length_gap_svg(const LengthGapReport& r) {
  std::vector<svg::Bar> bars;
  for (const auto& d : r.by_difficulty)
    bars.push_back({"d" + std::to_string(d.difficulty), {d.mean_shortest, d.mean_longest}});
  return svg::bar_chart("Shortest vs longest correct trace per prompt", {"shortest", "longest"}, bars);
}

std::string keyword_svg(const KeywordReport& r) {
  std::vector<svg::Bar> bars;
  for (std::size_t k = 0; k < kKeywords.size(); ++k)
    bars.push_back({std::string(task::token_name(kKeywords[k])), {r.shortest[k], r.longest[k]}});
  return svg::bar_chart("Keyword count per trace", {"shortest set", "longest set"}, bars);
}

std::string phase_svg(const PhaseReport& r) {
  std::vector<svg::Bar> bars;
  for (const auto& b : r.buckets) {
    const auto p = b.proportion();
    bars.push_back({std::to_string(b.lo) + "-" + std::to_string(b.hi), {p[0], p[1], p[2]}});
  }
  return svg::bar_chart("Phase share by trace length", {"execution", "reflection", "transition"}, bars);
}

std::string pca_svg(const PcaProjection& p, int layer) {
  svg::ScatterGroup e{"efficient", {}, {}}, v{"verbose", {}, {}};
  for (std::size_t i = 0; i < p.coords.size(); ++i) {
    auto& g = p.efficient[i] ? e : v;
    g.x.push_back(p.coords[i][0]);
    g.y.push_back(p.coords[i][1]);
  }
  return svg::scatter_chart("Final reasoning token, layer " + std::to_string(layer), "PC1", "PC2", {e, v});
}

}  // namespace terse::analysis
