#include "terse/eval.hpp"

#include "terse/util.hpp"

namespace terse::eval {

std::vector<std::vector<task::TraceRecord>> sample_groups(const model::Transformer& model,
                                                          const std::vector<task::Problem>& problems,
                                                          const EvalSpec& spec, const HookFactory& hooks) {
  if (spec.k <= 0) throw ContractError("eval: k must be positive");
  const auto k = static_cast<std::size_t>(spec.k);
  std::vector<std::vector<task::TraceRecord>> groups(problems.size(), std::vector<task::TraceRecord>(k));
  parallel_for(problems.size() * k, spec.threads, [&](std::size_t idx) {
    const std::size_t p = idx / k, j = idx % k;
    model::SamplerConfig cfg = spec.sampler;
    cfg.seed = task::mix_seed(spec.sampler.seed, idx);
    model::SampleOptions opts;
    if (hooks) opts.hooks = hooks(problems[p]);
    auto r = model::sample(model, problems[p], cfg, opts).record;
    r.id = idx;
    groups[p][j] = std::move(r);
  });
  return groups;
}

Summary summarize(const std::vector<std::vector<task::TraceRecord>>& groups) {
  Summary s;
  s.pass1 = model::pass_at_1(groups).mean;
  double total = 0.0, total_correct = 0.0;
  for (const auto& g : groups)
    for (const auto& r : g) {
      ++s.n;
      total += static_cast<double>(r.length);
      if (r.correct) {
        ++s.n_correct;
        total_correct += static_cast<double>(r.length);
      }
    }
  s.mean_length = s.n ? total / static_cast<double>(s.n) : 0.0;
  s.mean_correct_length = s.n_correct ? total_correct / static_cast<double>(s.n_correct) : 0.0;
  return s;
}

}  // namespace terse::eval
