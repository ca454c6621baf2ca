#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "criteria.hpp"
#include "rapo/errors.hpp"
#include "rapo/harness.hpp"

namespace {

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  for (const auto& s : split_list(text)) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      if (s[0] == '-') throw std::invalid_argument(s);
      v = std::stoull(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != s.size()) throw rapo::ConfigError("bad seed '" + s + "'");
    seeds.push_back(v);
  }
  return seeds;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Retention-aware policy optimization on a synthetic continual stream"};
  app.require_subcommand(1);

  std::string config_path, seeds_text = "1,2,3", algo_text = "sft,grpo,rapo", out_dir;
  int stop_after = 0;
  bool resume = false;
  unsigned jobs = 1;
  auto* run = app.add_subcommand("run", "train every (algorithm, seed) pair");
  run->add_option("--config", config_path, "INI config file (defaults when omitted)");
  run->add_option("--seeds", seeds_text, "comma-separated seeds");
  run->add_option("--algo", algo_text, "comma-separated: sft,grpo,rapo,grpo_v1,grpo_v2");
  run->add_option("--out", out_dir, "output directory")->required();
  run->add_option("--stop-after-task", stop_after, "stop every run after this task");
  run->add_flag("--resume", resume, "continue from the newest checkpoints in --out");
  run->add_option("--jobs", jobs, "runs trained in parallel")->check(CLI::PositiveNumber);

  std::string in_dir;
  auto* report = app.add_subcommand("report", "aggregate evalmatrix.csv files into summary.csv");
  report->add_option("--in", in_dir, "directory written by run")->required();

  std::string suite = "all";
  auto* verify = app.add_subcommand("verify", "run acceptance suites");
  verify->add_option("--suite", suite, "suite name or 'all'");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const rapo::ExperimentConfig config =
          config_path.empty() ? rapo::ExperimentConfig{} : rapo::load_config(config_path);
      config.validate();
      std::vector<rapo::Algorithm> algos;
      for (const auto& a : split_list(algo_text)) algos.push_back(rapo::parse_algorithm(a));
      rapo::ExperimentOptions opts;
      opts.out_dir = out_dir;
      if (stop_after > 0) opts.stop_after_task = stop_after;
      opts.resume = resume;
      opts.jobs = jobs;
      const auto result = rapo::run_experiment(config, parse_seeds(seeds_text), algos, opts);
      for (const auto& row : result.summary) std::cout << rapo::format_table_row(row) << '\n';
      if (result.summary.empty()) std::cout << "runs incomplete; no summary written\n";
    } else if (*report) {
      const auto rows = rapo::report_directory(in_dir);
      std::ofstream out(std::filesystem::path(in_dir) / "summary.csv", std::ios::trunc);
      rapo::write_summary_csv(out, rows);
      for (const auto& row : rows) std::cout << rapo::format_table_row(row) << '\n';
    } else if (*verify) {
      return rapo::acceptance::run_suite(suite, std::cout) ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
