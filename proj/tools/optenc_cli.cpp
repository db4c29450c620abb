// Command-line driver for the option-encoder pipeline.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <tuple>

#include "CLI11.hpp"
#include "optenc/harness.hpp"

namespace fs = std::filesystem;
using namespace optenc;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";
  std::string stage_cache;
};

void add_common(CLI::App* sub, Common& c, bool need_config = true) {
  auto* opt = sub->add_option("--config", c.config, "experiment config (JSON)");
  if (need_config) opt->required()->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "master seed, overrides the config");
  sub->add_option("--out-dir", c.out_dir, "output directory");
  sub->add_option("--stage-cache", c.stage_cache, "stage cache directory (default: <out-dir>/.stage_cache)");
}

ExperimentConfig load(const Common& c) {
  auto cfg = load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

fs::path cache_of(const Common& c) {
  return c.stage_cache.empty() ? fs::path(c.out_dir) / ".stage_cache" : fs::path(c.stage_cache);
}

void summarize(const RunManifest& rm, const fs::path& out) {
  std::printf("stages executed: %zu", rm.executed_stages.size());
  for (const auto& s : rm.executed_stages) std::printf(" %s", s.c_str());
  std::printf("\ncurves: %zu, heatmaps: %zu\noutput: %s\n", rm.curves.size(), rm.heatmaps.size(),
              out.string().c_str());
}

int report(const Common& c) {
  const fs::path out = c.out_dir;
  std::vector<io::LabeledCurve> curves;
  if (fs::exists(out / "curves"))
    for (const auto& e : fs::directory_iterator(out / "curves"))
      if (e.path().extension() == ".csv")
        for (auto& lc : io::read_curves(e.path())) curves.push_back(std::move(lc));
  std::sort(curves.begin(), curves.end(), [](const auto& a, const auto& b) {
    return std::tie(a.agent, a.goal, a.seed) < std::tie(b.agent, b.goal, b.seed);
  });
  if (curves.empty()) throw std::runtime_error("no curves found under " + (out / "curves").string());
  auto bundle = aggregate_report(curves);
  write_report(out / "report", bundle);
  std::printf("%-24s %14s %12s %6s\n", "agent", "mean_auc", "std_auc", "n");
  for (const auto& r : bundle.auc)
    std::printf("%-24s %14.1f %12.1f %6zu\n", r.agent.c_str(), r.mean_auc, r.std_auc, r.n_curves);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Option encoder: discover, distill and transfer options in gridworlds"};
  app.require_subcommand(1);

  Common common;
  std::string sweep_param;
  std::vector<std::size_t> sweep_values;

  struct Target {
    const char* name;
    const char* help;
    PipelineTarget target;
  };
  const Target targets[] = {
      {"discover", "compute eigen-options (or goal options) and write the option bundle", PipelineTarget::Discover},
      {"collect", "build the policy dataset from the discovered options", PipelineTarget::Collect},
      {"distill", "train the option encoder", PipelineTarget::Distill},
      {"extract", "fit standalone policies to the distilled tables", PipelineTarget::Extract},
      {"heatmap", "visitation heatmaps for the configured policy sets", PipelineTarget::Heatmap},
      {"transfer", "train the agent roster on the sampled goals", PipelineTarget::Transfer},
      {"pipeline", "run every stage and write the report", PipelineTarget::All},
  };
  std::vector<std::pair<CLI::App*, PipelineTarget>> staged;
  for (const auto& t : targets) {
    auto* sub = app.add_subcommand(t.name, t.help);
    add_common(sub, common);
    staged.push_back({sub, t.target});
  }
  auto* sweep_cmd = app.add_subcommand("sweep", "rerun the pipeline over values of M, T or N_experts");
  add_common(sweep_cmd, common);
  sweep_cmd->add_option("--param", sweep_param, "M, T or N_experts")
      ->required()
      ->check(CLI::IsMember({"M", "T", "N_experts"}));
  sweep_cmd->add_option("--values", sweep_values, "comma-separated values")->required()->delimiter(',');
  auto* report_cmd = app.add_subcommand("report", "aggregate curves found in <out-dir>/curves");
  add_common(report_cmd, common, false);

  CLI11_PARSE(app, argc, argv);

  try {
    for (auto [sub, target] : staged)
      if (sub->parsed()) {
        auto rm = run_pipeline(load(common), common.out_dir, cache_of(common), target);
        summarize(rm, common.out_dir);
        return 0;
      }
    if (sweep_cmd->parsed()) {
      auto res = sweep(load(common), sweep_param, sweep_values, common.out_dir, cache_of(common));
      std::printf("sweep %s: %zu runs, %zu curves\n", res.param.c_str(), res.runs.size(), res.curves.size());
      return 0;
    }
    if (report_cmd->parsed()) return report(common);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
