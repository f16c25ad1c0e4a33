#include "safelayer/safe_rl.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <optional>
#include <string>

#include "safelayer/errors.hpp"

namespace safelayer::safe_rl {

using constraints::Assembled;

double violation_cost(const Assembled& c, const VectorXd& action) {
  double eq = 0.0, in = 0.0;
  for (Eigen::Index i = 0; i < c.A.rows(); ++i) {
    // A zero row is violated by its right-hand side alone, whatever the action.
    const double norm = c.A.row(i).norm();
    const double r = norm == 0.0 ? c.b[i] : (c.A.row(i).dot(action) - c.b[i]) / norm;
    eq += r * r;
  }
  for (Eigen::Index i = 0; i < c.G.rows(); ++i) {
    const double norm = c.G.row(i).norm();
    const double r =
        std::max(norm == 0.0 ? -c.h[i] : (c.G.row(i).dot(action) - c.h[i]) / norm, 0.0);
    in += r * r;
  }
  return std::sqrt(eq) + std::sqrt(in);
}

double max_violation(const Assembled& c, const VectorXd& action) {
  double v = 0.0;
  if (c.G.rows() > 0) v = std::max(v, (c.G * action - c.h).maxCoeff());
  if (c.A.rows() > 0) v = std::max(v, (c.A * action - c.b).cwiseAbs().maxCoeff());
  return v;
}

OptLayer::OptLayer(constraints::ConstraintSet set, LayerOptions options)
    : set_(std::move(set)), options_(options) {}

namespace {

std::optional<qp::Solution> try_solve(const qp::Problem& p, int k_max, double early_exit) {
  qp::SolverOptions opts;
  opts.k_max = k_max;
  opts.early_exit_tol = early_exit;
  try {
    return qp::solve(p, opts);
  } catch (const Error&) {
    return std::nullopt;
  }
}

}  // namespace

Assembled OptLayer::assemble(const VectorXd& state) const {
  Assembled c = set_.assemble(state);
  const double at_zero = constraints::null_step_violation(constraints::relaxed(c));
  if (at_zero > 0.0)
    throw InfeasibleQp("null step violates the assembled constraints by " +
                       std::to_string(at_zero));
  return c;
}

qp::Problem OptLayer::problem(const Assembled& c, const VectorXd& predicted) const {
  const double d = options_.variable_scale;
  return qp::Problem::projection(predicted / d, c.G * d, c.h, c.A * d, c.b);
}

std::optional<VectorXd> OptLayer::resolve(const Assembled& c, const VectorXd& predicted) const {
  const auto s = try_solve(problem(c, predicted), options_.resolve_iterations,
                            qp::SolverOptions{}.early_exit_tol);
  if (!s) return std::nullopt;
  VectorXd a = options_.variable_scale * s->x;
  if (!a.allFinite() || max_violation(c, a) > options_.safety_tol) return std::nullopt;
  return a;
}

LayerOutput OptLayer::finish(const Assembled& c, const VectorXd& predicted,
                             const std::optional<qp::Solution>& sol) const {
  LayerOutput out;
  out.cost = violation_cost(c, predicted);
  out.predicted_violation = max_violation(c, predicted);
  if (sol) {
    out.action = options_.variable_scale * sol->x;
    out.violation = max_violation(c, out.action);
    if (out.action.allFinite() && sol->kkt_residual <= options_.refine_tol &&
        out.violation <= options_.safety_tol)
      return out;
  }

  if (const auto a = resolve(c, predicted)) {
    out.action = *a;
    out.violation = max_violation(c, out.action);
    out.fallback = 1;
    return out;
  }

  // Without a solution of the full set, relaxable rows give way to the null step.
  Assembled r = c;
  if (constraints::null_step_violation(c) > 0.0) {
    r = constraints::relaxed(c);
    out.relaxed = true;
    if (const auto a = resolve(r, predicted)) {
      out.action = *a;
      out.violation = max_violation(c, out.action);
      out.fallback = 3;
      return out;
    }
  }

  // x = 0 is feasible for r, so the segment [0, a] leaves the set at most once.
  VectorXd a = out.action.size() ? out.action : VectorXd::Zero(predicted.size());
  if (!a.allFinite()) a.setZero();
  double t = 1.0;
  const VectorXd Ga = r.G * a;
  for (Eigen::Index i = 0; i < Ga.size(); ++i)
    if (Ga[i] > 0.0) t = std::min(t, r.h[i] / Ga[i]);
  out.action = std::max(t, 0.0) * a;
  if (max_violation(r, out.action) > options_.safety_tol) out.action.setZero();
  out.violation = max_violation(c, out.action);
  out.fallback = 2;
  return out;
}

LayerOutput OptLayer::apply(const VectorXd& state, const VectorXd& predicted) const {
  const Assembled c = assemble(state);
  return finish(c, predicted, try_solve(problem(c, predicted), options_.k_max, 0.0));
}

MatrixXd OptLayer::action_jacobian(const VectorXd& state, const VectorXd& predicted) const {
  Assembled c = assemble(state);
  if (constraints::null_step_violation(c) > 0.0 && !resolve(c, predicted))
    c = constraints::relaxed(c);
  const qp::Problem p = problem(c, predicted);
  qp::SolverOptions opts;
  opts.k_max = options_.resolve_iterations;
  // a* = d u*(q), q = -a~ / d, so d a* / d a~ = -d u* / d q.
  return -qp::solution_gradient(p, qp::solve(p, opts));
}

std::vector<LayerOutput> OptLayer::apply_batch(std::span<const VectorXd> states,
                                               std::span<const VectorXd> predicted) const {
  if (states.size() != predicted.size())
    throw ShapeMismatch("apply_batch: states and predictions differ in count");
  std::vector<Assembled> cs;
  std::vector<qp::Problem> problems;
  cs.reserve(states.size());
  problems.reserve(states.size());
  for (std::size_t i = 0; i < states.size(); ++i) {
    cs.push_back(assemble(states[i]));
    problems.push_back(problem(cs.back(), predicted[i]));
  }
  std::vector<std::optional<qp::Solution>> sols(states.size());
  try {
    auto batch = qp::solve_batch(problems, options_.k_max);
    for (std::size_t i = 0; i < sols.size(); ++i) sols[i] = std::move(batch[i]);
  } catch (const Error&) {
    // One failed instance leaves the others to be solved on their own.
    for (std::size_t i = 0; i < sols.size(); ++i)
      sols[i] = try_solve(problems[i], options_.k_max, 0.0);
  }
  std::vector<LayerOutput> out;
  out.reserve(states.size());
  for (std::size_t i = 0; i < states.size(); ++i)
    out.push_back(finish(cs[i], predicted[i], sols[i]));
  return out;
}

OptLayer reacher_layer(const constraints::ReacherLimits& limits, double dt,
                       LayerOptions options) {
  options.variable_scale = dt * limits.qd_max;
  return OptLayer(constraints::reacher_constraints(limits, dt, env::state_layout()), options);
}

double Episode::total_reward() const {
  double r = 0.0;
  for (const auto& rec : records) r += rec.reward;
  return r;
}

bool Episode::collision() const {
  return std::any_of(records.begin(), records.end(),
                     [](const TrajectoryRecord& r) { return r.collision; });
}

double Episode::mean_cost() const {
  if (records.empty()) return 0.0;
  double c = 0.0;
  for (const auto& rec : records) c += rec.cost;
  return c / static_cast<double>(records.size());
}

int Episode::limit_violations(double tol) const {
  return static_cast<int>(std::count_if(records.begin(), records.end(), [tol](const auto& r) {
    return r.executed_violation > tol;
  }));
}

namespace {

TrajectoryRecord make_record(const VectorXd& obs, const policy::ActionSample& sample,
                             const LayerOutput& out, bool constrained) {
  TrajectoryRecord rec;
  rec.obs = obs;
  rec.predicted = sample.action;
  rec.corrected = out.action;
  rec.value = sample.value;
  rec.cost = out.cost;
  rec.executed_violation = constrained ? out.violation : out.predicted_violation;
  return rec;
}

void record_step(TrajectoryRecord& rec, const env::StepResult& r) {
  rec.reward = r.reward;
  rec.terminated = r.terminated;
  rec.truncated = r.truncated;
  rec.collision = r.info.collision;
}

}  // namespace

Episode build_traj(env::Reacher2D& env, const policy::GaussianPolicy& policy,
                   const OptLayer& layer, bool constrained, std::mt19937_64& rng) {
  Episode ep;
  VectorXd s = env.reset(rng);
  while (true) {
    const auto sample = policy.sample(s, rng);
    const LayerOutput out = layer.apply(s, sample.action);
    ep.fallbacks += out.fallback != 0;
    TrajectoryRecord rec = make_record(s, sample, out, constrained);
    const auto r = env.step(constrained ? out.action : sample.action);
    record_step(rec, r);
    ep.records.push_back(std::move(rec));
    s = r.observation;
    if (r.terminated || r.truncated) {
      if (r.truncated) ep.bootstrap_value = policy.forward(s).value;
      return ep;
    }
  }
}

RolloutPool::RolloutPool(const env::EnvConfig& env_config, const OptLayer& layer, int workers,
                         std::uint64_t seed)
    : layer_(layer) {
  if (workers < 1) throw ConfigError("rollout workers must be at least 1");
  for (int w = 0; w < workers; ++w) {
    envs_.emplace_back(env_config);
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(w)};
    rngs_.emplace_back(seq);
  }
}

std::vector<Episode> RolloutPool::collect(const policy::GaussianPolicy& policy, bool constrained,
                                          int min_steps) {
  const int K = workers();
  const int quota = (std::max(min_steps, 1) + K - 1) / K;
  std::vector<std::vector<Episode>> done(K);
  std::vector<Episode> current(K);
  std::vector<VectorXd> obs(K);
  std::vector<int> steps(K, 0);
  std::vector<bool> open(K, false);

  std::vector<int> active;
  std::vector<VectorXd> states, preds;
  std::vector<policy::ActionSample> samples;
  while (true) {
    active.clear();
    for (int w = 0; w < K; ++w) {
      if (!open[w] && steps[w] < quota) {
        obs[w] = envs_[w].reset(rngs_[w]);
        current[w] = Episode{};
        open[w] = true;
      }
      if (open[w]) active.push_back(w);
    }
    if (active.empty()) break;

    states.clear();
    preds.clear();
    samples.clear();
    for (int w : active) {
      samples.push_back(policy.sample(obs[w], rngs_[w]));
      states.push_back(obs[w]);
      preds.push_back(samples.back().action);
    }
    const auto outs = layer_.apply_batch(states, preds);

    for (std::size_t k = 0; k < active.size(); ++k) {
      const int w = active[k];
      Episode& ep = current[w];
      ep.fallbacks += outs[k].fallback != 0;
      TrajectoryRecord rec = make_record(obs[w], samples[k], outs[k], constrained);
      const auto r = envs_[w].step(constrained ? outs[k].action : samples[k].action);
      record_step(rec, r);
      ep.records.push_back(std::move(rec));
      obs[w] = r.observation;
      ++steps[w];
      if (r.terminated || r.truncated) {
        if (r.truncated) ep.bootstrap_value = policy.forward(obs[w]).value;
        done[w].push_back(std::move(ep));
        open[w] = false;
      }
    }
  }

  std::vector<Episode> out;
  for (auto& list : done)
    for (auto& ep : list) out.push_back(std::move(ep));
  return out;
}

std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kUp: return "up";
    case Strategy::kCp: return "cp";
    case Strategy::kCc: return "cc";
    case Strategy::kCpc: return "cpc";
  }
  return "?";
}

Strategy parse_strategy(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  for (Strategy s : kAllStrategies)
    if (strategy_name(s) == lower) return s;
  throw ConfigError("unknown strategy '" + std::string(name) + "' (expected up, cp, cc or cpc)");
}

bool executes_corrections(Strategy s) { return s != Strategy::kUp; }

trpo::Batch make_batch(std::span<const Episode> episodes, bool corrected_actions,
                       bool subtract_cost) {
  Eigen::Index n = 0;
  for (const auto& ep : episodes) n += static_cast<Eigen::Index>(ep.records.size());
  if (n == 0) throw ShapeMismatch("make_batch: no steps");
  const auto& first = episodes.front().records.front();
  trpo::Batch b;
  b.obs.resize(first.obs.size(), n);
  b.actions.resize(first.predicted.size(), n);
  b.rewards.resize(n);
  b.values.resize(n);
  b.bootstrap_value = VectorXd::Zero(n);
  b.terminated.assign(n, false);
  b.truncated.assign(n, false);
  Eigen::Index i = 0;
  for (const auto& ep : episodes) {
    for (const auto& rec : ep.records) {
      b.obs.col(i) = rec.obs;
      b.actions.col(i) = corrected_actions ? rec.corrected : rec.predicted;
      b.rewards[i] = subtract_cost ? rec.reward - rec.cost : rec.reward;
      b.values[i] = rec.value;
      b.terminated[i] = rec.terminated;
      b.truncated[i] = rec.truncated;
      if (rec.truncated) b.bootstrap_value[i] = ep.bootstrap_value;
      ++i;
    }
  }
  return b;
}

void TrainConfig::validate() const {
  if (episodes < 1) throw ConfigError("train.episodes must be at least 1");
  if (steps_per_round < 1) throw ConfigError("train.steps_per_round must be at least 1");
  if (workers < 1) throw ConfigError("train.parallel must be at least 1");
}

TrainingLog run_strategy(const TrainConfig& config, const env::EnvConfig& env_config,
                         const OptLayer& layer, policy::GaussianPolicy& policy,
                         trpo::PolicyUpdater& updater, const TrainCallbacks& callbacks) {
  config.validate();
  using Clock = std::chrono::steady_clock;
  const auto start = Clock::now();
  auto elapsed_ms = [&] {
    return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
  };

  RolloutPool pool(env_config, layer, config.workers, config.seed);
  const bool constrained = executes_corrections(config.strategy);
  TrainingLog log;
  int cum_collisions = 0;
  int round = 0;
  while (static_cast<int>(log.episodes.size()) < config.episodes) {
    std::vector<Episode> eps = pool.collect(policy, constrained, config.steps_per_round);
    const std::size_t room = static_cast<std::size_t>(config.episodes) - log.episodes.size();
    if (eps.size() > room) eps.resize(room);
    const double now = elapsed_ms();

    int batch_steps = 0;
    for (const auto& ep : eps) {
      EpisodeLog e;
      e.episode = static_cast<int>(log.episodes.size());
      e.reward = ep.total_reward();
      e.steps = static_cast<int>(ep.records.size());
      e.collision = ep.collision();
      cum_collisions += e.collision;
      e.cum_collisions = cum_collisions;
      e.violations = ep.limit_violations();
      e.mean_c = ep.mean_cost();
      e.wall_ms = now;
      batch_steps += e.steps;
      log.fallbacks += ep.fallbacks;
      log.episodes.push_back(e);
      if (callbacks.on_episode) callbacks.on_episode(e);
    }
    log.total_steps += batch_steps;

    auto run_update = [&](int call, bool corrected, bool subtract) {
      const trpo::Batch batch = make_batch(eps, corrected, subtract);
      UpdateLog u;
      u.round = round;
      u.call = call;
      u.episodes_done = static_cast<int>(log.episodes.size());
      u.batch_steps = batch_steps;
      u.stats = updater.update(policy, batch);
      log.updates.push_back(u);
    };
    switch (config.strategy) {
      case Strategy::kUp:
      case Strategy::kCp: run_update(0, false, false); break;
      case Strategy::kCc: run_update(0, true, false); break;
      case Strategy::kCpc:
        run_update(0, false, true);
        run_update(1, true, false);
        break;
    }
    ++round;
    if (callbacks.on_round) callbacks.on_round(round, policy);
  }
  log.wall_ms = elapsed_ms();
  return log;
}

}  // namespace safelayer::safe_rl
