#pragma once

// Diagonal-Gaussian policy with a separate value network. Both networks are
// tanh MLPs; the policy mean and value are linear read-outs, the log standard
// deviation is a free parameter vector shared by all states.
//
// Batched routines take observations column-wise (obs_dim x batch).

#include <functional>
#include <iosfwd>
#include <random>
#include <vector>

#include <Eigen/Dense>

namespace safelayer::policy {

using Eigen::MatrixXd;
using Eigen::VectorXd;

class Mlp {
 public:
  Mlp() = default;
  /// sizes = {in, hidden..., out}; all weights and biases zero.
  explicit Mlp(std::vector<int> sizes);

  /// Orthogonal weights scaled by `hidden_gain` (hidden layers) and
  /// `out_gain` (last layer), zero biases.
  void init_orthogonal(std::mt19937_64& rng, double hidden_gain, double out_gain);

  int input_size() const { return sizes_.front(); }
  int output_size() const { return sizes_.back(); }
  const std::vector<int>& sizes() const { return sizes_; }
  Eigen::Index num_params() const;

  VectorXd params() const;
  void set_params(const VectorXd& flat);

  /// Activations of every layer, kept for backward/jvp.
  struct Tape {
    std::vector<MatrixXd> a;  // a[0] = input, a.back() = output
  };
  MatrixXd forward(const MatrixXd& x, Tape* tape = nullptr) const;

  /// Gradient of sum(d_out .* output) with respect to the flat parameters.
  VectorXd backward(const Tape& tape, const MatrixXd& d_out) const;

  /// Directional derivative of the outputs along the flat parameter tangent.
  MatrixXd jvp(const Tape& tape, const VectorXd& tangent) const;

  std::vector<MatrixXd> W;
  std::vector<VectorXd> b;

 private:
  std::vector<int> sizes_;
};

struct PolicyConfig {
  int obs_dim = 0;
  int action_dim = 2;
  std::vector<int> hidden = {32, 32};
  double log_std_init = -1.0;
  double mean_out_gain = 0.01;
};

inline constexpr double kLogStdMin = -20.0;
inline constexpr double kLogStdMax = 2.0;

struct ActionSample {
  VectorXd action;
  VectorXd mean;
  double log_prob = 0.0;
  double value = 0.0;
};

class GaussianPolicy {
 public:
  GaussianPolicy() = default;
  /// Zero-initialised networks; call init() for the training initialisation.
  explicit GaussianPolicy(const PolicyConfig& config);

  void init(std::mt19937_64& rng);

  const PolicyConfig& config() const { return config_; }
  int obs_dim() const { return config_.obs_dim; }
  int action_dim() const { return config_.action_dim; }

  struct Output {
    VectorXd mean;
    VectorXd std;
    double value = 0.0;
  };
  /// Throws ShapeMismatch on a wrong observation length.
  Output forward(const VectorXd& obs) const;
  ActionSample sample(const VectorXd& obs, std::mt19937_64& rng) const;
  double log_prob(const VectorXd& obs, const VectorXd& action) const;

  MatrixXd means(const MatrixXd& obs) const;
  VectorXd values(const MatrixXd& obs) const;
  VectorXd log_probs(const MatrixXd& obs, const MatrixXd& actions) const;

  /// Policy parameters: mean network followed by log_std.
  Eigen::Index num_policy_params() const;
  VectorXd policy_params() const;
  /// log_std entries are clamped to [kLogStdMin, kLogStdMax].
  void set_policy_params(const VectorXd& flat);

  Eigen::Index num_value_params() const { return value_net_.num_params(); }
  VectorXd value_params() const { return value_net_.params(); }
  void set_value_params(const VectorXd& flat) { value_net_.set_params(flat); }

  /// Gradient of mean_i w_i log pi(a_i | s_i) with respect to policy_params().
  VectorXd log_prob_gradient(const MatrixXd& obs, const MatrixXd& actions,
                             const VectorXd& weights) const;

  /// Gradient of mean_i (V(s_i) - target_i)^2 / 2 with respect to value_params().
  VectorXd value_loss_gradient(const MatrixXd& obs, const VectorXd& targets) const;

  /// Fisher-vector product: the Hessian of the mean KL(pi_this || pi) at
  /// pi = pi_this, applied to v, without the Hessian ever being formed.
  VectorXd fisher_vector_product(const MatrixXd& obs, const VectorXd& v) const;
  /// Same product with the forward pass over `obs` done once.
  std::function<VectorXd(const VectorXd&)> fisher_operator(const MatrixXd& obs) const;

  const Mlp& mean_net() const { return mean_net_; }
  const Mlp& value_net() const { return value_net_; }
  Mlp& mean_net() { return mean_net_; }
  Mlp& value_net() { return value_net_; }
  const VectorXd& log_std() const { return log_std_; }

  void save(std::ostream& out) const;
  /// Throws ConfigError on a malformed or incompatible checkpoint.
  static GaussianPolicy load(std::istream& in);

 private:
  PolicyConfig config_;
  Mlp mean_net_;
  Mlp value_net_;
  VectorXd log_std_;
};

/// Mean over observations of KL(old(.|s) || new(.|s)) for diagonal Gaussians.
double kl(const GaussianPolicy& old_policy, const GaussianPolicy& new_policy,
          const MatrixXd& obs);

/// Log density of N(mean, diag(std^2)) at x.
double gaussian_log_density(const VectorXd& x, const VectorXd& mean, const VectorXd& std);

}  // namespace safelayer::policy
