#include <cstdlib>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "terse/pipeline.hpp"
#include "terse/simd/kernels.hpp"

using namespace terse;

namespace {

std::vector<double> parse_grid(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    const double v = std::stod(item, &used);
    if (used != item.size()) throw CLI::ValidationError("--grid", "not a number: '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw CLI::ValidationError("--grid", "empty grid");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"terse: reasoning-length steering and efficiency RL on a toy transformer"};
  app.require_subcommand(1);
  app.set_version_flag("--version", pipeline::kVersion);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  std::string out;
  bool force = false, skip_if_fresh = false, quiet = false;
  std::string simd = "auto";
  std::optional<int> layer;
  std::optional<double> lambda;
  std::optional<std::size_t> k_per_side;
  std::string grid;

  app.add_option("--config", config_path, "JSON experiment config (unknown keys are rejected)")
      ->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Experiment seed (required here or in the config)");
  app.add_option("--threads", threads, "Worker threads for rollouts and sweeps")->check(CLI::PositiveNumber);
  app.add_option("--out", out, "Run directory (default: $TERSE_OUT_ROOT or ./runs)");
  app.add_flag("--force", force, "Overwrite existing stage outputs");
  app.add_flag("--skip-if-fresh", skip_if_fresh, "Skip a stage whose config and inputs are unchanged");
  app.add_flag("-q,--quiet", quiet, "No progress output");
  app.add_option("--simd", simd, "Kernel backend")->check(CLI::IsMember({"auto", "scalar", "avx2"}));
  app.add_option("--layer", layer, "Steering layer (restricts the sweep to one layer)");
  app.add_option("--lambda", lambda, "Single steering coefficient (replaces the lambda grid)");
  app.add_option("--k-per-side", k_per_side, "Traces per contrastive set");
  app.add_option("--grid", grid, "Comma-separated lambda grid");

  std::vector<CLI::App*> subs;
  for (const auto& s : pipeline::kStages) subs.push_back(app.add_subcommand(s, "Run the " + s + " stage"));
  auto* all = app.add_subcommand("all", "Run every stage in order");

  CLI11_PARSE(app, argc, argv);

  try {
    if ((simd != "auto" || std::getenv("TERSE_SIMD") == nullptr) && !simd::select_backend(simd))
      throw std::runtime_error("kernel backend '" + simd + "' is not available on this CPU");
    auto cfg = config_path.empty() ? pipeline::default_config() : pipeline::load_config(config_path);
    if (seed) cfg.seed = seed;
    if (layer) cfg.steering.layers = {*layer};
    if (!grid.empty()) cfg.steering.lambdas = parse_grid(grid);
    if (lambda) cfg.steering.lambdas = {*lambda};
    if (k_per_side) cfg.steering.k_per_side = *k_per_side;

    pipeline::RunOptions opts;
    if (!out.empty()) opts.out = out;
    else if (const char* root = std::getenv("TERSE_OUT_ROOT")) opts.out = root;
    else opts.out = "runs";
    opts.threads = threads;
    opts.force = force;
    opts.skip_if_fresh = skip_if_fresh;
    opts.quiet = quiet;

    std::vector<std::string> stages;
    if (all->parsed()) stages = pipeline::kStages;
    for (auto* s : subs)
      if (s->parsed()) stages.push_back(s->get_name());
    for (const auto& s : stages) pipeline::run_stage(s, cfg, opts);
  } catch (const std::exception& e) {
    std::cerr << "terse: error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
