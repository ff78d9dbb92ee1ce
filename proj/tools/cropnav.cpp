// Command-line front end: single runs, seeded ablations and plotting.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cropnav/harness.hpp"

namespace fs = std::filesystem;
using namespace cropnav;

namespace {

// "a..b" or a single seed
std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  const auto dots = text.find("..");
  if (dots == std::string::npos) return {std::stoull(text)};
  const std::uint64_t a = std::stoull(text.substr(0, dots));
  const std::uint64_t b = std::stoull(text.substr(dots + 2));
  if (b < a) throw ConfigError("seed range is empty: " + text);
  std::vector<std::uint64_t> out;
  for (std::uint64_t s = a; s <= b; ++s) out.push_back(s);
  return out;
}

std::vector<std::string> split(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void print_metrics(const Scenario& s, const RunMetrics& m) {
  std::cout << s.name << " seed " << s.seed << ": " << m.distance_m << " m, " << m.recoveries
            << " recoveries, " << m.interventions << " interventions, "
            << (m.completion ? "completed" : "not completed") << " (" << m.wall_time << " s wall)\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Row-crop navigation simulator and experiment runner"};
  app.require_subcommand(1);

  std::string scenario_name;
  std::uint64_t seed = 1;
  std::string out_dir;
  auto* run = app.add_subcommand("run", "Run one scenario");
  run->add_option("--scenario", scenario_name, "Built-in scenario name or scenario file")->required();
  run->add_option("--seed", seed, "Master seed");
  run->add_option("--out", out_dir, "Output directory")->required();

  std::string scenario_list;
  std::string seed_range = "1..10";
  unsigned threads = 0;
  auto* ablation = app.add_subcommand("ablation", "Run scenarios over a seed range and tabulate");
  ablation->add_option("--scenarios", scenario_list, "Comma-separated scenario names or files")->required();
  ablation->add_option("--seeds", seed_range, "Seed range a..b");
  ablation->add_option("--out", out_dir, "Output directory")->required();
  ablation->add_option("--threads", threads, "Worker threads (0 = all cores)");

  std::string run_dir;
  auto* plot = app.add_subcommand("plot", "Render plot.svg for a run directory");
  plot->add_option("--run", run_dir, "Run directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      Scenario s = resolve_scenario(scenario_name);
      s.seed = seed;
      const RunResult r = run_scenario(s);
      write_run(s, r, out_dir);
      print_metrics(s, r.metrics);
    } else if (*ablation) {
      std::vector<Scenario> scenarios;
      for (const std::string& name : split(scenario_list)) scenarios.push_back(resolve_scenario(name));
      if (scenarios.size() < 2) throw ConfigError("ablation needs at least two scenarios");
      const AblationTable table = run_ablation(scenarios, parse_seeds(seed_range), threads, fs::path(out_dir) / "runs");
      fs::create_directories(out_dir);
      write_ablation_csv(table, fs::path(out_dir) / "ablation.csv");
      const std::string text = format_ablation_text(table);
      std::ofstream(fs::path(out_dir) / "ablation.txt") << text;
      std::cout << text;
    } else if (*plot) {
      std::cout << emit_plots(run_dir).string() << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
