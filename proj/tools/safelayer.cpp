// Command-line runner: train, report, print-config, solve-qp.

#include <omp.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "safelayer/errors.hpp"
#include "safelayer/experiment.hpp"
#include "safelayer/qp.hpp"

using namespace safelayer;
namespace ex = safelayer::experiment;

namespace {

// SAFELAYER_THREADS caps the OpenMP team size and the number of concurrent
// cells.
int thread_cap() {
  const char* env = std::getenv("SAFELAYER_THREADS");
  if (!env || !*env) return omp_get_max_threads();
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError("SAFELAYER_THREADS must be a positive integer");
  return static_cast<int>(n);
}

struct TrainFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> strategy;
  std::optional<double> beta_coll;
  std::optional<int> episodes;
  std::optional<std::string> out;
  std::optional<int> parallel;
  int jobs = 1;
};

ex::ExperimentConfig resolve(const TrainFlags& f) {
  ex::ExperimentConfig c = f.config.empty() ? ex::ExperimentConfig{} : ex::load_config(f.config);
  if (f.seed) c.seeds = {*f.seed};
  if (f.strategy) c.strategies = {safe_rl::parse_strategy(*f.strategy)};
  if (f.beta_coll) c.beta_colls = {*f.beta_coll};
  if (f.episodes) c.episodes = *f.episodes;
  if (f.out) c.out_dir = *f.out;
  if (f.parallel) c.parallel = *f.parallel;
  c.validate();
  return c;
}

void add_config_flags(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--config", f.config, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "single seed, replaces experiment.seeds");
  cmd->add_option("--strategy", f.strategy, "up, cp, cc or cpc");
  cmd->add_option("--beta-coll", f.beta_coll, "single collision weight");
  cmd->add_option("--episodes", f.episodes, "episode budget per cell");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--parallel", f.parallel, "environments stepped in lockstep");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Safe action layer: training campaigns and QP tools"};
  app.require_subcommand(1);

  TrainFlags train_flags;
  auto* train = app.add_subcommand("train", "train every (strategy, beta_coll, seed) cell");
  add_config_flags(train, train_flags);
  train->add_option("--jobs", train_flags.jobs, "cells trained concurrently")
      ->check(CLI::PositiveNumber);

  std::string report_dir;
  auto* report = app.add_subcommand("report", "summaries and plot series for a run directory");
  report->add_option("dir", report_dir, "run directory")->required();

  TrainFlags print_flags;
  auto* print = app.add_subcommand("print-config", "print the resolved configuration as JSON");
  add_config_flags(print, print_flags);

  std::string dump_path;
  int k_max = qp::kDefaultIterations;
  auto* solve = app.add_subcommand("solve-qp", "solve one QP from a dump file");
  solve->add_option("file", dump_path, "dump file")->required()->check(CLI::ExistingFile);
  solve->add_option("--k-max", k_max, "iteration cap")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    const int cap = thread_cap();
    omp_set_num_threads(cap);

    if (*print) {
      std::cout << ex::to_json(resolve(print_flags)).dump(2) << '\n';
    } else if (*train) {
      const ex::ExperimentConfig c = resolve(train_flags);
      const int jobs = std::min(train_flags.jobs, cap);
      for (const auto& r : ex::run(c, jobs))
        std::cerr << ex::cell_name(r.cell) << ": " << r.log.episodes.size() << " episodes, "
                  << r.log.total_steps << " steps, " << r.log.episodes.back().cum_collisions
                  << " collisions, " << r.log.fallbacks << " layer fallbacks\n";
      std::ifstream summary(std::filesystem::path(c.out_dir) / "summary.csv");
      std::cout << summary.rdbuf();
    } else if (*report) {
      ex::report(report_dir);
      std::ifstream summary(std::filesystem::path(report_dir) / "summary.csv");
      std::cout << summary.rdbuf();
    } else if (*solve) {
      std::ifstream in(dump_path);
      const qp::Problem p = qp::read_problem(in);
      qp::SolverOptions opts;
      opts.k_max = k_max;
      const qp::Solution s = qp::solve(p, opts);
      qp::write_solution(std::cout, s);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
