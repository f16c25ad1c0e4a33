#pragma once

// Seeded training campaigns over a grid of (strategy, beta_coll, seed) cells,
// with on-disk logs and the summary/plot series derived from them.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "safelayer/constraints.hpp"
#include "safelayer/env.hpp"
#include "safelayer/policy.hpp"
#include "safelayer/safe_rl.hpp"
#include "safelayer/trpo.hpp"

namespace safelayer::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

struct ExperimentConfig {
  env::EnvConfig env;
  constraints::ReacherLimits limits;
  policy::PolicyConfig policy;  // obs_dim is fixed by the environment
  trpo::TrpoConfig trpo;
  safe_rl::LayerOptions layer;
  std::vector<safe_rl::Strategy> strategies = {safe_rl::Strategy::kCpc};
  std::vector<double> beta_colls = {1.0};
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  int episodes = 500;
  int steps_per_round = 2048;
  int parallel = 4;  // environments stepped in lockstep per cell
  std::string out_dir = "runs";
  int smoothing_window = 40;
  int summary_last = 200;      // M in "mean reward over the last M episodes"
  double reward_target = 0.0;  // R in "episodes to reach R"
  int checkpoint_every = 0;    // rounds between checkpoints, 0 for final only

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

json to_json(const ExperimentConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
ExperimentConfig config_from_json(const json& j);
ExperimentConfig load_config(const fs::path& path);

struct Cell {
  safe_rl::Strategy strategy = safe_rl::Strategy::kCpc;
  double beta_coll = 1.0;
  std::uint64_t seed = 0;
};

/// Strategy-major, then beta_coll, then seed.
std::vector<Cell> cells(const ExperimentConfig& c);
std::string cell_name(const Cell& cell);  // e.g. "cpc_beta1_seed0"

struct CellResult {
  Cell cell;
  safe_rl::TrainingLog log;
  policy::GaussianPolicy policy;
};

/// Trains one cell. With `dir`, writes episodes.csv, timing.csv, updates.csv
/// and checkpoints there; episode rows are flushed as they are produced.
CellResult run_cell(const ExperimentConfig& c, const Cell& cell,
                    const std::optional<fs::path>& dir = std::nullopt);

/// Runs every cell into out_dir/<cell name>/, `jobs` cells at a time, then
/// writes config.json and summary.csv. Returns the results in cell order.
std::vector<CellResult> run(const ExperimentConfig& c, int jobs = 1);

// Episode CSV columns are deterministic functions of (config, seed); wall
// time lives in timing.csv.
std::string episodes_header();
std::string episode_row(const safe_rl::EpisodeLog& e);

struct EpisodeRow {
  int episode = 0;
  double reward = 0.0;
  int steps = 0;
  bool collision = false;
  int cum_collisions = 0;
  int violations = 0;
  double mean_c = 0.0;
};

/// Throws MissingData if the file is absent, empty or malformed.
std::vector<EpisodeRow> read_episodes(const fs::path& csv);

/// Trailing mean over up to `window` values ending at each index.
std::vector<double> moving_average(const std::vector<double>& x, int window);
std::vector<int> cumulative(const std::vector<bool>& events);
/// First episode (1-based count) at which the moving average reaches
/// `target`, or nullopt.
std::optional<int> episodes_to_reach(const std::vector<double>& smoothed, double target);

struct Summary {
  std::string cell;
  int episodes = 0;
  double last_mean_reward = 0.0;
  int collisions = 0;
  int violations = 0;
  double mean_steps = 0.0;
  double wall_s = 0.0;  // NaN when no timing is available
  std::optional<int> episodes_to_target;
};

Summary summarize(const std::string& cell, const std::vector<EpisodeRow>& rows, int last,
                  int window, double target, double wall_s);
std::string summary_header();
std::string summary_row(const Summary& s);

/// Reads every cell directory under `dir`, writes curves.csv into each
/// (episode, reward, moving average, cumulative collisions) and summary.csv
/// at the top. Settings come from dir/config.json when present.
std::vector<Summary> report(const fs::path& dir);

}  // namespace safelayer::experiment
