#pragma once

// Trust-region policy optimisation: natural-gradient step from conjugate
// gradient on Fisher-vector products, scaled to the KL radius and accepted by
// backtracking line search, followed by a few epochs of value regression.

#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "safelayer/policy.hpp"

namespace safelayer::trpo {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Flat rollout data, one column/entry per step, episodes stored back to back.
/// A step ends its episode when terminated (no bootstrap) or truncated
/// (bootstrap with `bootstrap_value`, the value of the next observation).
struct Batch {
  MatrixXd obs;      // obs_dim x N
  MatrixXd actions;  // action_dim x N
  VectorXd rewards;
  VectorXd values;
  std::vector<bool> terminated;
  std::vector<bool> truncated;
  VectorXd bootstrap_value;  // read only where truncated

  Eigen::Index size() const { return rewards.size(); }
  /// Throws ShapeMismatch on inconsistent lengths or a final step that does
  /// not end an episode.
  void validate() const;
};

struct Advantages {
  VectorXd advantages;
  VectorXd returns;  // advantages + values, the value regression targets
};

/// Generalised advantage estimation with discount gamma and trace decay lam.
Advantages compute_advantages(const Batch& batch, double gamma, double lam);

/// Shift/scale to mean 0, std 1; unchanged when the std is below 1e-12.
VectorXd normalize(const VectorXd& advantages);

/// mean_i exp(log pi(a_i|s_i) - log pi_old(a_i|s_i)) A_i.
double surrogate_loss(const policy::GaussianPolicy& policy, const policy::GaussianPolicy& old,
                      const MatrixXd& obs, const MatrixXd& actions, const VectorXd& advantages);

/// Solves A x = b for symmetric positive definite A given as a product.
VectorXd conjugate_gradient(const std::function<VectorXd(const VectorXd&)>& product,
                            const VectorXd& b, int iterations, double residual_tol = 1e-10);

struct TrpoConfig {
  double gamma = 0.99;
  double lam = 0.97;
  double delta_kl = 0.01;
  int cg_iterations = 10;
  double cg_damping = 0.1;
  double backtrack_coef = 0.8;
  int backtrack_steps = 10;
  int value_epochs = 5;
  double value_lr = 1e-3;
  int value_minibatch = 64;
  bool normalize_advantages = true;

  void validate() const;
};

struct UpdateStats {
  double mean_reward = 0.0;
  double kl = 0.0;
  double surrogate_improvement = 0.0;
  double value_loss = 0.0;  // after the value fit
  bool accepted = false;
  int backtracks = 0;
};

class PolicyUpdater {
 public:
  virtual ~PolicyUpdater() = default;
  virtual UpdateStats update(policy::GaussianPolicy& policy, const Batch& batch) = 0;
};

class Trpo : public PolicyUpdater {
 public:
  explicit Trpo(TrpoConfig config = {});

  /// Throws NonFiniteGradient, leaving the policy untouched, if the policy
  /// gradient or the value gradient is not finite.
  UpdateStats update(policy::GaussianPolicy& policy, const Batch& batch) override;

  const TrpoConfig& config() const { return config_; }

 private:
  double fit_value(policy::GaussianPolicy& policy, const MatrixXd& obs, const VectorXd& targets);

  TrpoConfig config_;
  // Adam state for the value network, kept across updates.
  VectorXd adam_m_, adam_v_;
  long adam_t_ = 0;
};

}  // namespace safelayer::trpo
