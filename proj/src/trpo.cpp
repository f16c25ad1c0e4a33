#include "safelayer/trpo.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "safelayer/errors.hpp"

namespace safelayer::trpo {

using policy::GaussianPolicy;

void Batch::validate() const {
  const Eigen::Index n = size();
  if (n == 0) throw ShapeMismatch("empty batch");
  if (obs.cols() != n || actions.cols() != n || values.size() != n ||
      static_cast<Eigen::Index>(terminated.size()) != n ||
      static_cast<Eigen::Index>(truncated.size()) != n || bootstrap_value.size() != n)
    throw ShapeMismatch("batch fields have inconsistent lengths");
  if (!terminated.back() && !truncated.back())
    throw ShapeMismatch("batch ends in the middle of an episode");
}

Advantages compute_advantages(const Batch& batch, double gamma, double lam) {
  batch.validate();
  const Eigen::Index n = batch.size();
  Advantages out;
  out.advantages.resize(n);
  double running = 0.0;
  for (Eigen::Index i = n - 1; i >= 0; --i) {
    double next_value;
    if (batch.terminated[i]) {
      next_value = 0.0;
      running = 0.0;
    } else if (batch.truncated[i]) {
      next_value = batch.bootstrap_value[i];
      running = 0.0;
    } else {
      next_value = batch.values[i + 1];
    }
    const double delta = batch.rewards[i] + gamma * next_value - batch.values[i];
    running = delta + gamma * lam * running;
    out.advantages[i] = running;
  }
  out.returns = out.advantages + batch.values;
  return out;
}

VectorXd normalize(const VectorXd& advantages) {
  const double mean = advantages.mean();
  const double var = (advantages.array() - mean).square().mean();
  const double sd = std::sqrt(var);
  if (!(sd >= 1e-12)) return advantages;
  return (advantages.array() - mean) / sd;
}

double surrogate_loss(const GaussianPolicy& policy, const GaussianPolicy& old,
                      const MatrixXd& obs, const MatrixXd& actions, const VectorXd& advantages) {
  const VectorXd ratio =
      (policy.log_probs(obs, actions) - old.log_probs(obs, actions)).array().exp();
  return ratio.dot(advantages) / static_cast<double>(advantages.size());
}

VectorXd conjugate_gradient(const std::function<VectorXd(const VectorXd&)>& product,
                            const VectorXd& b, int iterations, double residual_tol) {
  VectorXd x = VectorXd::Zero(b.size());
  VectorXd r = b, p = b;
  double rr = r.squaredNorm();
  for (int k = 0; k < iterations && rr > residual_tol; ++k) {
    const VectorXd Ap = product(p);
    const double alpha = rr / p.dot(Ap);
    x += alpha * p;
    r -= alpha * Ap;
    const double rr_new = r.squaredNorm();
    p = r + (rr_new / rr) * p;
    rr = rr_new;
  }
  return x;
}

void TrpoConfig::validate() const {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("trpo.gamma must lie in [0, 1]");
  if (!(lam >= 0.0 && lam <= 1.0)) throw ConfigError("trpo.lam must lie in [0, 1]");
  if (!(delta_kl > 0.0)) throw ConfigError("trpo.delta_kl must be positive");
  if (cg_iterations < 1) throw ConfigError("trpo.cg_iterations must be at least 1");
  if (!(cg_damping >= 0.0)) throw ConfigError("trpo.cg_damping must be non-negative");
  if (!(backtrack_coef > 0.0 && backtrack_coef < 1.0))
    throw ConfigError("trpo.backtrack_coef must lie in (0, 1)");
  if (backtrack_steps < 1) throw ConfigError("trpo.backtrack_steps must be at least 1");
  if (value_epochs < 0) throw ConfigError("trpo.value_epochs must be non-negative");
  if (!(value_lr > 0.0)) throw ConfigError("trpo.value_lr must be positive");
  if (value_minibatch < 1) throw ConfigError("trpo.value_minibatch must be at least 1");
}

Trpo::Trpo(TrpoConfig config) : config_(config) { config_.validate(); }

UpdateStats Trpo::update(GaussianPolicy& policy, const Batch& batch) {
  const Advantages adv = compute_advantages(batch, config_.gamma, config_.lam);
  const VectorXd A =
      config_.normalize_advantages ? normalize(adv.advantages) : adv.advantages;
  if (!A.allFinite()) throw NonFiniteGradient("advantages are not finite");

  UpdateStats stats;
  stats.mean_reward = batch.rewards.mean();

  const GaussianPolicy old = policy;
  GaussianPolicy next = policy;
  const VectorXd theta = old.policy_params();
  const VectorXd g = old.log_prob_gradient(batch.obs, batch.actions, A);
  if (!g.allFinite()) throw NonFiniteGradient("policy gradient is not finite");
  const VectorXd value_grad = old.value_loss_gradient(batch.obs, adv.returns);
  if (!value_grad.allFinite()) throw NonFiniteGradient("value gradient is not finite");

  if (g.squaredNorm() > 0.0) {
    const auto fisher = old.fisher_operator(batch.obs);
    auto fvp = [&](const VectorXd& v) -> VectorXd {
      return fisher(v) + config_.cg_damping * v;
    };
    const VectorXd step_dir = conjugate_gradient(fvp, g, config_.cg_iterations);
    const double shs = step_dir.dot(fvp(step_dir));
    if (shs > 0.0 && std::isfinite(shs)) {
      const VectorXd full_step = std::sqrt(2.0 * config_.delta_kl / shs) * step_dir;
      const double surr_old = A.mean();
      GaussianPolicy candidate = old;
      double frac = 1.0;
      for (int k = 0; k < config_.backtrack_steps; ++k, frac *= config_.backtrack_coef) {
        candidate.set_policy_params(theta + frac * full_step);
        const double improvement =
            surrogate_loss(candidate, old, batch.obs, batch.actions, A) - surr_old;
        const double d_kl = kl(old, candidate, batch.obs);
        if (std::isfinite(improvement) && improvement > 0.0 && d_kl <= config_.delta_kl) {
          next.set_policy_params(candidate.policy_params());
          stats.accepted = true;
          stats.backtracks = k;
          stats.kl = d_kl;
          stats.surrogate_improvement = improvement;
          break;
        }
      }
    }
  }

  stats.value_loss = fit_value(next, batch.obs, adv.returns);
  policy = std::move(next);
  return stats;
}

double Trpo::fit_value(GaussianPolicy& policy, const MatrixXd& obs, const VectorXd& targets) {
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  VectorXd w = policy.value_params();
  if (adam_m_.size() != w.size()) {
    adam_m_ = VectorXd::Zero(w.size());
    adam_v_ = VectorXd::Zero(w.size());
    adam_t_ = 0;
  }
  const Eigen::Index n = obs.cols();
  const Eigen::Index mb = config_.value_minibatch;
  for (int epoch = 0; epoch < config_.value_epochs; ++epoch) {
    for (Eigen::Index start = 0; start < n; start += mb) {
      const Eigen::Index len = std::min(mb, n - start);
      const VectorXd grad =
          policy.value_loss_gradient(obs.middleCols(start, len), targets.segment(start, len));
      if (!grad.allFinite()) throw NonFiniteGradient("value gradient is not finite");
      ++adam_t_;
      adam_m_ = kBeta1 * adam_m_ + (1.0 - kBeta1) * grad;
      adam_v_ = kBeta2 * adam_v_ + (1.0 - kBeta2) * grad.cwiseAbs2();
      const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(adam_t_));
      const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(adam_t_));
      w -= config_.value_lr *
           ((adam_m_ / c1).array() / ((adam_v_ / c2).array().sqrt() + kEps)).matrix();
      policy.set_value_params(w);
    }
  }
  return 0.5 * (policy.values(obs) - targets).squaredNorm() / static_cast<double>(n);
}

}  // namespace safelayer::trpo
