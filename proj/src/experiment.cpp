#include "safelayer/experiment.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

#include "safelayer/errors.hpp"

namespace safelayer::experiment {

using safe_rl::Strategy;

namespace {

// Reads optional keys from one JSON object and rejects the rest.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <class T>
  void get(const char* key, T& value) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      value = it->template get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where(key) + " has the wrong type");
    }
  }

  Section sub(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    const auto it = j_.find(key);
    return Section(it == j_.end() ? empty : *it, where(key));
  }

  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) throw ConfigError("unknown key " + where(item.key()));
  }

 private:
  std::string where(const std::string& key = "") const {
    if (key.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string fmt_beta(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", x);
  return buf;
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(line.substr(start, comma - start));
    if (comma == std::string::npos) return out;
    start = comma + 1;
  }
}

int to_int(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) throw MissingData("malformed " + what + ": '" + s + "'");
  return v;
}

double to_double(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) throw MissingData("malformed " + what + ": '" + s + "'");
  return v;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p);
  if (!out) throw ConfigError("cannot write " + p.string());
  return out;
}

}  // namespace

void ExperimentConfig::validate() const {
  env.validate();
  limits.validate();
  trpo.validate();
  if (policy.hidden.empty()) throw ConfigError("policy.hidden must list at least one layer");
  for (int h : policy.hidden)
    if (h < 1) throw ConfigError("policy.hidden sizes must be at least 1");
  if (layer.k_max < 1) throw ConfigError("layer.k_max must be at least 1");
  if (layer.resolve_iterations < 1) throw ConfigError("layer.resolve_iterations must be at least 1");
  if (!(layer.safety_tol >= 0.0)) throw ConfigError("layer.safety_tol must be non-negative");
  if (!(layer.refine_tol >= 0.0)) throw ConfigError("layer.refine_tol must be non-negative");
  if (strategies.empty()) throw ConfigError("experiment.strategies must not be empty");
  if (beta_colls.empty()) throw ConfigError("experiment.beta_colls must not be empty");
  for (double b : beta_colls)
    if (!(b > 0.0)) throw ConfigError("experiment.beta_colls must be positive");
  if (seeds.empty()) throw ConfigError("experiment.seeds must not be empty");
  if (episodes < 1) throw ConfigError("experiment.episodes must be at least 1");
  if (steps_per_round < 1) throw ConfigError("experiment.steps_per_round must be at least 1");
  if (parallel < 1) throw ConfigError("experiment.parallel must be at least 1");
  if (smoothing_window < 1) throw ConfigError("experiment.smoothing_window must be at least 1");
  if (summary_last < 1) throw ConfigError("experiment.summary_last must be at least 1");
  if (checkpoint_every < 0) throw ConfigError("experiment.checkpoint_every must be non-negative");
}

json to_json(const ExperimentConfig& c) {
  std::vector<std::string> strategies;
  for (Strategy s : c.strategies) strategies.emplace_back(safe_rl::strategy_name(s));
  const auto& r = c.env.robot;
  return {
      {"env",
       {{"dt", c.env.dt},
        {"max_steps", c.env.max_steps},
        {"sample_half_range", c.env.sample_half_range},
        {"collision_penalty", c.env.collision_penalty},
        {"proximity_threshold", c.env.proximity_threshold},
        {"proximity_bonus", c.env.proximity_bonus},
        {"obstacle_radius", c.env.obstacle_radius},
        {"obstacle_clearance", c.env.obstacle_clearance},
        {"max_obstacle_samples", c.env.max_obstacle_samples},
        {"collision_substeps", c.env.collision_substeps},
        {"robot",
         {{"l1", r.l1},
          {"l2", r.l2},
          {"m1", r.m1},
          {"m2", r.m2},
          {"link_radius", r.link_radius},
          {"base_radius", r.base_radius}}}}},
      {"constraints",
       {{"qd_max", c.limits.qd_max},
        {"tau_max", c.limits.tau_max},
        {"elbow_limit", c.limits.elbow_limit},
        {"xi", c.limits.xi},
        {"d_m", c.limits.d_m},
        {"d_M", c.limits.d_M},
        {"relax_torque", c.limits.relax_torque},
        {"collision_recovery", c.limits.collision_recovery}}},
      {"policy",
       {{"hidden", c.policy.hidden},
        {"log_std_init", c.policy.log_std_init},
        {"mean_out_gain", c.policy.mean_out_gain}}},
      {"trpo",
       {{"gamma", c.trpo.gamma},
        {"lam", c.trpo.lam},
        {"delta_kl", c.trpo.delta_kl},
        {"cg_iterations", c.trpo.cg_iterations},
        {"cg_damping", c.trpo.cg_damping},
        {"backtrack_coef", c.trpo.backtrack_coef},
        {"backtrack_steps", c.trpo.backtrack_steps},
        {"value_epochs", c.trpo.value_epochs},
        {"value_lr", c.trpo.value_lr},
        {"value_minibatch", c.trpo.value_minibatch},
        {"normalize_advantages", c.trpo.normalize_advantages}}},
      {"layer",
       {{"k_max", c.layer.k_max},
        {"refine_tol", c.layer.refine_tol},
        {"safety_tol", c.layer.safety_tol},
        {"resolve_iterations", c.layer.resolve_iterations}}},
      {"experiment",
       {{"strategies", strategies},
        {"beta_colls", c.beta_colls},
        {"seeds", c.seeds},
        {"episodes", c.episodes},
        {"steps_per_round", c.steps_per_round},
        {"parallel", c.parallel},
        {"out_dir", c.out_dir},
        {"smoothing_window", c.smoothing_window},
        {"summary_last", c.summary_last},
        {"reward_target", c.reward_target},
        {"checkpoint_every", c.checkpoint_every}}},
  };
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  Section root(j, "");

  Section env = root.sub("env");
  env.get("dt", c.env.dt);
  env.get("max_steps", c.env.max_steps);
  env.get("sample_half_range", c.env.sample_half_range);
  env.get("collision_penalty", c.env.collision_penalty);
  env.get("proximity_threshold", c.env.proximity_threshold);
  env.get("proximity_bonus", c.env.proximity_bonus);
  env.get("obstacle_radius", c.env.obstacle_radius);
  env.get("obstacle_clearance", c.env.obstacle_clearance);
  env.get("max_obstacle_samples", c.env.max_obstacle_samples);
  env.get("collision_substeps", c.env.collision_substeps);
  Section robot = env.sub("robot");
  robot.get("l1", c.env.robot.l1);
  robot.get("l2", c.env.robot.l2);
  robot.get("m1", c.env.robot.m1);
  robot.get("m2", c.env.robot.m2);
  robot.get("link_radius", c.env.robot.link_radius);
  robot.get("base_radius", c.env.robot.base_radius);
  robot.finish();
  env.finish();

  Section lim = root.sub("constraints");
  lim.get("qd_max", c.limits.qd_max);
  lim.get("tau_max", c.limits.tau_max);
  lim.get("elbow_limit", c.limits.elbow_limit);
  lim.get("xi", c.limits.xi);
  lim.get("d_m", c.limits.d_m);
  lim.get("d_M", c.limits.d_M);
  lim.get("relax_torque", c.limits.relax_torque);
  lim.get("collision_recovery", c.limits.collision_recovery);
  lim.finish();

  Section pol = root.sub("policy");
  pol.get("hidden", c.policy.hidden);
  pol.get("log_std_init", c.policy.log_std_init);
  pol.get("mean_out_gain", c.policy.mean_out_gain);
  pol.finish();

  Section tr = root.sub("trpo");
  tr.get("gamma", c.trpo.gamma);
  tr.get("lam", c.trpo.lam);
  tr.get("delta_kl", c.trpo.delta_kl);
  tr.get("cg_iterations", c.trpo.cg_iterations);
  tr.get("cg_damping", c.trpo.cg_damping);
  tr.get("backtrack_coef", c.trpo.backtrack_coef);
  tr.get("backtrack_steps", c.trpo.backtrack_steps);
  tr.get("value_epochs", c.trpo.value_epochs);
  tr.get("value_lr", c.trpo.value_lr);
  tr.get("value_minibatch", c.trpo.value_minibatch);
  tr.get("normalize_advantages", c.trpo.normalize_advantages);
  tr.finish();

  Section lay = root.sub("layer");
  lay.get("k_max", c.layer.k_max);
  lay.get("refine_tol", c.layer.refine_tol);
  lay.get("safety_tol", c.layer.safety_tol);
  lay.get("resolve_iterations", c.layer.resolve_iterations);
  lay.finish();

  Section ex = root.sub("experiment");
  std::vector<std::string> names;
  for (Strategy s : c.strategies) names.emplace_back(safe_rl::strategy_name(s));
  ex.get("strategies", names);
  c.strategies.clear();
  for (const auto& n : names) c.strategies.push_back(safe_rl::parse_strategy(n));
  ex.get("beta_colls", c.beta_colls);
  ex.get("seeds", c.seeds);
  ex.get("episodes", c.episodes);
  ex.get("steps_per_round", c.steps_per_round);
  ex.get("parallel", c.parallel);
  ex.get("out_dir", c.out_dir);
  ex.get("smoothing_window", c.smoothing_window);
  ex.get("summary_last", c.summary_last);
  ex.get("reward_target", c.reward_target);
  ex.get("checkpoint_every", c.checkpoint_every);
  ex.finish();

  root.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

std::vector<Cell> cells(const ExperimentConfig& c) {
  std::vector<Cell> out;
  for (Strategy s : c.strategies)
    for (double b : c.beta_colls)
      for (std::uint64_t seed : c.seeds) out.push_back({s, b, seed});
  return out;
}

std::string cell_name(const Cell& cell) {
  return std::string(safe_rl::strategy_name(cell.strategy)) + "_beta" + fmt_beta(cell.beta_coll) +
         "_seed" + std::to_string(cell.seed);
}

std::string episodes_header() {
  return "episode,reward,steps,collision,cum_collisions,violations,mean_c";
}

std::string episode_row(const safe_rl::EpisodeLog& e) {
  return std::to_string(e.episode) + ',' + fmt(e.reward) + ',' + std::to_string(e.steps) + ',' +
         (e.collision ? "1" : "0") + ',' + std::to_string(e.cum_collisions) + ',' +
         std::to_string(e.violations) + ',' + fmt(e.mean_c);
}

CellResult run_cell(const ExperimentConfig& c, const Cell& cell,
                    const std::optional<fs::path>& dir) {
  c.validate();
  env::EnvConfig env_config = c.env;
  env_config.beta_coll = cell.beta_coll;
  const safe_rl::OptLayer layer = safe_rl::reacher_layer(c.limits, env_config.dt, c.layer);

  policy::PolicyConfig pc = c.policy;
  pc.obs_dim = env::Layout::kSize;
  pc.action_dim = 2;
  policy::GaussianPolicy pol(pc);
  std::mt19937_64 init_rng(cell.seed);
  pol.init(init_rng);
  trpo::Trpo updater(c.trpo);

  safe_rl::TrainConfig tc;
  tc.strategy = cell.strategy;
  tc.episodes = c.episodes;
  tc.steps_per_round = c.steps_per_round;
  tc.workers = c.parallel;
  tc.seed = cell.seed;

  std::ofstream episodes, timing;
  safe_rl::TrainCallbacks cb;
  if (dir) {
    fs::create_directories(*dir);
    episodes = open_out(*dir / "episodes.csv");
    timing = open_out(*dir / "timing.csv");
    episodes << episodes_header() << '\n';
    timing << "episode,wall_ms\n";
    cb.on_episode = [&](const safe_rl::EpisodeLog& e) {
      episodes << episode_row(e) << '\n' << std::flush;
      timing << e.episode << ',' << fmt(e.wall_ms) << '\n' << std::flush;
    };
    if (c.checkpoint_every > 0)
      cb.on_round = [&](int round, const policy::GaussianPolicy& p) {
        if (round % c.checkpoint_every != 0) return;
        std::ofstream out = open_out(*dir / ("policy_round" + std::to_string(round) + ".ckpt"));
        p.save(out);
      };
  }

  CellResult result{cell, {}, pol};
  result.log = safe_rl::run_strategy(tc, env_config, layer, pol, updater, cb);
  result.policy = pol;

  if (dir) {
    std::ofstream updates = open_out(*dir / "updates.csv");
    updates << "round,call,episodes_done,batch_steps,accepted,backtracks,kl,"
               "surrogate_improvement,value_loss,mean_reward\n";
    for (const auto& u : result.log.updates)
      updates << u.round << ',' << u.call << ',' << u.episodes_done << ',' << u.batch_steps << ','
              << (u.stats.accepted ? 1 : 0) << ',' << u.stats.backtracks << ','
              << fmt(u.stats.kl) << ',' << fmt(u.stats.surrogate_improvement) << ','
              << fmt(u.stats.value_loss) << ',' << fmt(u.stats.mean_reward) << '\n';
    std::ofstream ckpt = open_out(*dir / "policy.ckpt");
    pol.save(ckpt);
    std::ofstream meta = open_out(*dir / "run.json");
    meta << json{{"cell", cell_name(cell)},
                 {"strategy", safe_rl::strategy_name(cell.strategy)},
                 {"beta_coll", cell.beta_coll},
                 {"seed", cell.seed},
                 {"episodes", result.log.episodes.size()},
                 {"total_steps", result.log.total_steps},
                 {"fallbacks", result.log.fallbacks},
                 {"wall_ms", result.log.wall_ms}}
                .dump(2)
         << '\n';
  }
  return result;
}

std::vector<CellResult> run(const ExperimentConfig& c, int jobs) {
  c.validate();
  const fs::path root(c.out_dir);
  fs::create_directories(root);
  {
    std::ofstream out = open_out(root / "config.json");
    out << to_json(c).dump(2) << '\n';
  }

  const std::vector<Cell> grid = cells(c);
  std::vector<std::optional<CellResult>> results(grid.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&](bool single_thread) {
    if (single_thread) omp_set_num_threads(1);
    for (std::size_t i; (i = next++) < grid.size();) {
      try {
        results[i] = run_cell(c, grid[i], root / cell_name(grid[i]));
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int n = std::clamp(jobs, 1, static_cast<int>(grid.size()));
  if (n == 1) {
    worker(false);
  } else {
    std::vector<std::thread> threads;
    for (int t = 0; t < n; ++t) threads.emplace_back(worker, true);
    for (auto& t : threads) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  report(root);
  std::vector<CellResult> out;
  for (auto& r : results) out.push_back(std::move(*r));
  return out;
}

std::vector<EpisodeRow> read_episodes(const fs::path& csv) {
  std::ifstream in(csv);
  if (!in) throw MissingData("missing " + csv.string());
  std::string line;
  if (!std::getline(in, line) || line != episodes_header())
    throw MissingData(csv.string() + " lacks the episode header");
  std::vector<EpisodeRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line);
    if (f.size() != 7) throw MissingData(csv.string() + ": expected 7 fields in '" + line + "'");
    EpisodeRow r;
    r.episode = to_int(f[0], "episode");
    r.reward = to_double(f[1], "reward");
    r.steps = to_int(f[2], "steps");
    r.collision = to_int(f[3], "collision") != 0;
    r.cum_collisions = to_int(f[4], "cum_collisions");
    r.violations = to_int(f[5], "violations");
    r.mean_c = to_double(f[6], "mean_c");
    rows.push_back(r);
  }
  if (rows.empty()) throw MissingData(csv.string() + " has no episodes");
  return rows;
}

std::vector<double> moving_average(const std::vector<double>& x, int window) {
  if (window < 1) throw ConfigError("smoothing window must be at least 1");
  std::vector<double> out(x.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sum += x[i];
    if (i >= static_cast<std::size_t>(window)) sum -= x[i - window];
    out[i] = sum / static_cast<double>(std::min<std::size_t>(i + 1, window));
  }
  return out;
}

std::vector<int> cumulative(const std::vector<bool>& events) {
  std::vector<int> out(events.size());
  int total = 0;
  for (std::size_t i = 0; i < events.size(); ++i) out[i] = total += events[i];
  return out;
}

std::optional<int> episodes_to_reach(const std::vector<double>& smoothed, double target) {
  for (std::size_t i = 0; i < smoothed.size(); ++i)
    if (smoothed[i] >= target) return static_cast<int>(i + 1);
  return std::nullopt;
}

Summary summarize(const std::string& cell, const std::vector<EpisodeRow>& rows, int last,
                  int window, double target, double wall_s) {
  Summary s;
  s.cell = cell;
  s.episodes = static_cast<int>(rows.size());
  s.wall_s = wall_s;
  std::vector<double> rewards;
  std::vector<bool> hits;
  double steps = 0.0;
  for (const auto& r : rows) {
    rewards.push_back(r.reward);
    hits.push_back(r.collision);
    s.violations += r.violations;
    steps += r.steps;
  }
  s.collisions = rows.empty() ? 0 : cumulative(hits).back();
  s.mean_steps = rows.empty() ? 0.0 : steps / static_cast<double>(rows.size());
  const std::size_t m = std::min<std::size_t>(last, rows.size());
  double tail = 0.0;
  for (std::size_t i = rows.size() - m; i < rows.size(); ++i) tail += rewards[i];
  s.last_mean_reward = m ? tail / static_cast<double>(m) : 0.0;
  // Partial windows at the start are skipped.
  std::vector<double> smoothed = moving_average(rewards, window);
  const std::size_t first =
      smoothed.empty() ? 0 : std::min<std::size_t>(window, smoothed.size()) - 1;
  const auto reached =
      episodes_to_reach(std::vector<double>(smoothed.begin() + first, smoothed.end()), target);
  if (reached) s.episodes_to_target = *reached + static_cast<int>(first);
  return s;
}

std::string summary_header() {
  return "cell,episodes,last_mean_reward,collisions,violations,mean_steps,wall_s,ep_to_target";
}

std::string summary_row(const Summary& s) {
  return s.cell + ',' + std::to_string(s.episodes) + ',' + fmt(s.last_mean_reward) + ',' +
         std::to_string(s.collisions) + ',' + std::to_string(s.violations) + ',' +
         fmt(s.mean_steps) + ',' + (std::isnan(s.wall_s) ? std::string("N/A") : fmt(s.wall_s)) +
         ',' + (s.episodes_to_target ? std::to_string(*s.episodes_to_target) : "N/A");
}

std::vector<Summary> report(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw MissingData("no run directory " + dir.string());
  ExperimentConfig settings;
  if (fs::exists(dir / "config.json")) settings = load_config(dir / "config.json");

  std::vector<fs::path> cell_dirs;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_directory() && fs::exists(entry.path() / "episodes.csv"))
      cell_dirs.push_back(entry.path());
  if (cell_dirs.empty()) throw MissingData("no cell directories with episodes.csv in " + dir.string());
  std::sort(cell_dirs.begin(), cell_dirs.end());

  std::vector<Summary> out;
  for (const auto& cd : cell_dirs) {
    const auto rows = read_episodes(cd / "episodes.csv");
    double wall_s = std::nan("");
    if (fs::exists(cd / "run.json")) {
      std::ifstream in(cd / "run.json");
      wall_s = json::parse(in).at("wall_ms").get<double>() / 1000.0;
    }
    out.push_back(summarize(cd.filename().string(), rows, settings.summary_last,
                            settings.smoothing_window, settings.reward_target, wall_s));

    std::vector<double> rewards;
    std::vector<bool> hits;
    for (const auto& r : rows) {
      rewards.push_back(r.reward);
      hits.push_back(r.collision);
    }
    const auto smoothed = moving_average(rewards, settings.smoothing_window);
    const auto cum = cumulative(hits);
    std::ofstream curves = open_out(cd / "curves.csv");
    curves << "episode,reward,reward_ma,cum_collisions\n";
    for (std::size_t i = 0; i < rows.size(); ++i)
      curves << rows[i].episode << ',' << fmt(rewards[i]) << ',' << fmt(smoothed[i]) << ','
             << cum[i] << '\n';
  }
  std::ofstream summary = open_out(dir / "summary.csv");
  summary << summary_header() << '\n';
  for (const auto& s : out) summary << summary_row(s) << '\n';
  return out;
}

}  // namespace safelayer::experiment
