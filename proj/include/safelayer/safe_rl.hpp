#pragma once

// Safe action layer and constrained training loop. Each raw policy
// prediction is projected onto the per-step constraint set (closest point in
// L2), the amount by which it broke the constraints is measured on
// row-normalised matrices, and one of four update strategies decides which
// actions and rewards the policy learns from.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "safelayer/constraints.hpp"
#include "safelayer/env.hpp"
#include "safelayer/policy.hpp"
#include "safelayer/qp.hpp"
#include "safelayer/trpo.hpp"

namespace safelayer::safe_rl {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// c_eq + c_in with every row of A (resp. G) scaled to unit norm. A zero row
/// contributes its unscaled residual, so c = 0 exactly when `action` is
/// feasible.
double violation_cost(const constraints::Assembled& c, const VectorXd& action);

/// Largest raw violation max((G a - h)_i, |A a - b|_i, 0).
double max_violation(const constraints::Assembled& c, const VectorXd& action);

struct LayerOutput {
  VectorXd action;          // a*
  double cost = 0.0;        // c
  double violation = 0.0;   // max_violation of a* against the assembled set
  double predicted_violation = 0.0;  // max_violation of a~
  // 0 none, 1 re-solved, 2 scaled toward 0, 3 relaxable rows raised to 0
  int fallback = 0;
  bool relaxed = false;  // the enforced set is constraints::relaxed of the assembled one
};

struct LayerOptions {
  int k_max = qp::kDefaultIterations;
  /// The QP is posed in u = x / variable_scale. Choosing the scale of the
  /// feasible set (e.g. the per-step velocity bound) keeps the solver's
  /// starting point well centred; the projection itself is unchanged.
  double variable_scale = 1.0;
  /// A batch solution with a larger KKT residual, or violating the
  /// constraints by more than safety_tol, is re-solved with early exit.
  double refine_tol = 1e-9;
  double safety_tol = 1e-9;
  int resolve_iterations = 50;
};

class OptLayer {
 public:
  explicit OptLayer(constraints::ConstraintSet set, LayerOptions options = {});

  const constraints::ConstraintSet& constraint_set() const { return set_; }
  const LayerOptions& options() const { return options_; }

  /// Throws InfeasibleQp if x = 0 violates the assembled constraints once
  /// relaxable rows are raised to 0.
  constraints::Assembled assemble(const VectorXd& state) const;

  /// Closest-point QP for `predicted` in scaled variables u = x / scale.
  qp::Problem problem(const constraints::Assembled& c, const VectorXd& predicted) const;

  LayerOutput apply(const VectorXd& state, const VectorXd& predicted) const;

  /// d a* / d a~ by implicit differentiation at the converged projection.
  /// Throws DegenerateActiveSet where the projection is not differentiable.
  MatrixXd action_jacobian(const VectorXd& state, const VectorXd& predicted) const;

  /// One batched solve for all (state, prediction) pairs.
  std::vector<LayerOutput> apply_batch(std::span<const VectorXd> states,
                                       std::span<const VectorXd> predicted) const;

 private:
  LayerOutput finish(const constraints::Assembled& c, const VectorXd& predicted,
                     const std::optional<qp::Solution>& sol) const;
  /// Early-exit solve; the action if it satisfies c within safety_tol.
  std::optional<VectorXd> resolve(const constraints::Assembled& c,
                                  const VectorXd& predicted) const;

  constraints::ConstraintSet set_;
  LayerOptions options_;
};

struct TrajectoryRecord {
  VectorXd obs;        // s_i
  VectorXd predicted;  // a~_i
  VectorXd corrected;  // a*_i
  double reward = 0.0;
  double value = 0.0;
  double cost = 0.0;
  bool terminated = false;
  bool truncated = false;
  bool collision = false;
  double executed_violation = 0.0;  // max_violation of the executed action
};

struct Episode {
  std::vector<TrajectoryRecord> records;
  double bootstrap_value = 0.0;  // value of the final observation when truncated
  int fallbacks = 0;

  double total_reward() const;
  bool collision() const;
  double mean_cost() const;
  /// Executed actions breaking the assembled constraints by more than tol.
  int limit_violations(double tol = 1e-6) const;
};

/// Velocity, elbow, torque and collision constraints of the reacher, posed
/// in units of the per-step velocity bound.
OptLayer reacher_layer(const constraints::ReacherLimits& limits, double dt,
                       LayerOptions options = {});

/// One episode of the predict/correct/execute loop: a* is executed when
/// `constrained`, the raw prediction otherwise.
Episode build_traj(env::Reacher2D& env, const policy::GaussianPolicy& policy,
                   const OptLayer& layer, bool constrained, std::mt19937_64& rng);

/// K environments stepped in lockstep with one batched QP per step. Each
/// worker owns an environment and a random stream; results depend on
/// (seed, K) only.
class RolloutPool {
 public:
  RolloutPool(const env::EnvConfig& env_config, const OptLayer& layer, int workers,
              std::uint64_t seed);

  int workers() const { return static_cast<int>(envs_.size()); }

  /// Runs whole episodes until every worker has at least ceil(min_steps / K)
  /// steps. Episodes come back worker by worker, each in the order played.
  std::vector<Episode> collect(const policy::GaussianPolicy& policy, bool constrained,
                               int min_steps);

 private:
  const OptLayer& layer_;
  std::vector<env::Reacher2D> envs_;
  std::vector<std::mt19937_64> rngs_;
};

enum class Strategy { kUp, kCp, kCc, kCpc };

inline constexpr Strategy kAllStrategies[] = {Strategy::kUp, Strategy::kCp, Strategy::kCc,
                                              Strategy::kCpc};

std::string_view strategy_name(Strategy s);  // "up", "cp", "cc", "cpc"
/// Case-insensitive; throws ConfigError on unknown names.
Strategy parse_strategy(std::string_view name);
bool executes_corrections(Strategy s);

/// Flattens episodes for the updater, taking a* or a~ and r or r - c.
trpo::Batch make_batch(std::span<const Episode> episodes, bool corrected_actions,
                       bool subtract_cost);

struct TrainConfig {
  Strategy strategy = Strategy::kCpc;
  int episodes = 500;
  int steps_per_round = 2048;
  int workers = 4;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpisodeLog {
  int episode = 0;
  double reward = 0.0;
  int steps = 0;
  bool collision = false;
  int cum_collisions = 0;
  int violations = 0;
  double mean_c = 0.0;
  double wall_ms = 0.0;  // training time elapsed when the episode was logged
};

struct UpdateLog {
  int round = 0;
  int call = 0;  // 0, or 1 for the second CPC update
  int episodes_done = 0;
  int batch_steps = 0;
  trpo::UpdateStats stats;
};

struct TrainingLog {
  std::vector<EpisodeLog> episodes;
  std::vector<UpdateLog> updates;
  int total_steps = 0;
  int fallbacks = 0;
  double wall_ms = 0.0;
};

struct TrainCallbacks {
  std::function<void(const EpisodeLog&)> on_episode;
  /// Called after each round's updates with the number of rounds done.
  std::function<void(int, const policy::GaussianPolicy&)> on_round;
};

/// Alternates rollout rounds and strategy updates until `episodes` episodes
/// have been logged. The final round is trimmed to the budget.
TrainingLog run_strategy(const TrainConfig& config, const env::EnvConfig& env_config,
                         const OptLayer& layer, policy::GaussianPolicy& policy,
                         trpo::PolicyUpdater& updater, const TrainCallbacks& callbacks = {});

}  // namespace safelayer::safe_rl
