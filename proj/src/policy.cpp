#include "safelayer/policy.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <memory>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>

#include "safelayer/errors.hpp"

namespace safelayer::policy {
namespace {

constexpr const char* kCheckpointMagic = "safelayer-policy";
constexpr int kCheckpointVersion = 1;

MatrixXd orthogonal(std::mt19937_64& rng, int rows, int cols, double gain) {
  std::normal_distribution<double> n01;
  const int big = std::max(rows, cols), small = std::min(rows, cols);
  MatrixXd a(big, small);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = n01(rng);
  Eigen::HouseholderQR<MatrixXd> qr(a);
  MatrixXd q = qr.householderQ() * MatrixXd::Identity(big, small);
  const MatrixXd r = qr.matrixQR().topRows(small).triangularView<Eigen::Upper>();
  for (int j = 0; j < small; ++j)
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  return gain * (rows >= cols ? q : MatrixXd(q.transpose()));
}

void write_vector(std::ostream& out, const char* name, const VectorXd& v) {
  out << name << ' ' << v.size();
  for (Eigen::Index i = 0; i < v.size(); ++i) out << ' ' << std::setprecision(17) << v[i];
  out << '\n';
}

VectorXd read_vector(std::istream& in, const char* name, Eigen::Index expected) {
  std::string key;
  Eigen::Index n = -1;
  if (!(in >> key >> n) || key != name)
    throw ConfigError(std::string("checkpoint: expected record '") + name + "'");
  if (n != expected)
    throw ConfigError(std::string("checkpoint: '") + name + "' has " + std::to_string(n) +
                      " values, layout needs " + std::to_string(expected));
  VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i)
    if (!(in >> v[i])) throw ConfigError(std::string("checkpoint: truncated '") + name + "'");
  return v;
}

}  // namespace

Mlp::Mlp(std::vector<int> sizes) : sizes_(std::move(sizes)) {
  if (sizes_.size() < 2) throw ConfigError("an MLP needs at least input and output sizes");
  for (int s : sizes_)
    if (s < 1) throw ConfigError("MLP layer sizes must be positive");
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    W.push_back(MatrixXd::Zero(sizes_[l + 1], sizes_[l]));
    b.push_back(VectorXd::Zero(sizes_[l + 1]));
  }
}

void Mlp::init_orthogonal(std::mt19937_64& rng, double hidden_gain, double out_gain) {
  for (std::size_t l = 0; l < W.size(); ++l) {
    const double gain = l + 1 == W.size() ? out_gain : hidden_gain;
    W[l] = orthogonal(rng, static_cast<int>(W[l].rows()), static_cast<int>(W[l].cols()), gain);
    b[l].setZero();
  }
}

Eigen::Index Mlp::num_params() const {
  Eigen::Index n = 0;
  for (std::size_t l = 0; l < W.size(); ++l) n += W[l].size() + b[l].size();
  return n;
}

VectorXd Mlp::params() const {
  VectorXd flat(num_params());
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < W.size(); ++l) {
    flat.segment(k, W[l].size()) = W[l].reshaped();
    k += W[l].size();
    flat.segment(k, b[l].size()) = b[l];
    k += b[l].size();
  }
  return flat;
}

void Mlp::set_params(const VectorXd& flat) {
  if (flat.size() != num_params())
    throw ShapeMismatch("MLP parameter vector has " + std::to_string(flat.size()) +
                        " entries, expected " + std::to_string(num_params()));
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < W.size(); ++l) {
    W[l].reshaped() = flat.segment(k, W[l].size());
    k += W[l].size();
    b[l] = flat.segment(k, b[l].size());
    k += b[l].size();
  }
}

MatrixXd Mlp::forward(const MatrixXd& x, Tape* tape) const {
  if (x.rows() != input_size())
    throw ShapeMismatch("MLP input has " + std::to_string(x.rows()) + " rows, expected " +
                        std::to_string(input_size()));
  MatrixXd a = x;
  if (tape) {
    tape->a.clear();
    tape->a.push_back(a);
  }
  for (std::size_t l = 0; l < W.size(); ++l) {
    MatrixXd z = (W[l] * a).colwise() + b[l];
    if (l + 1 < W.size()) z = z.array().tanh();
    a = std::move(z);
    if (tape) tape->a.push_back(a);
  }
  return a;
}

VectorXd Mlp::backward(const Tape& tape, const MatrixXd& d_out) const {
  VectorXd grad(num_params());
  // Parameter offsets of each layer in the flat vector.
  std::vector<Eigen::Index> offset(W.size());
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < W.size(); ++l) {
    offset[l] = k;
    k += W[l].size() + b[l].size();
  }
  MatrixXd delta = d_out;
  for (std::size_t l = W.size(); l-- > 0;) {
    const MatrixXd& in = tape.a[l];
    grad.segment(offset[l], W[l].size()) = (delta * in.transpose()).reshaped();
    grad.segment(offset[l] + W[l].size(), b[l].size()) = delta.rowwise().sum();
    if (l > 0) delta = (W[l].transpose() * delta).cwiseProduct((1.0 - in.array().square()).matrix());
  }
  return grad;
}

MatrixXd Mlp::jvp(const Tape& tape, const VectorXd& tangent) const {
  const Eigen::Index batch = tape.a.front().cols();
  MatrixXd da = MatrixXd::Zero(input_size(), batch);
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < W.size(); ++l) {
    const auto dW = tangent.segment(k, W[l].size()).reshaped(W[l].rows(), W[l].cols());
    k += W[l].size();
    const auto db = tangent.segment(k, b[l].size());
    k += b[l].size();
    MatrixXd dz = (dW * tape.a[l] + W[l] * da).colwise() + db;
    if (l + 1 < W.size()) dz = dz.cwiseProduct((1.0 - tape.a[l + 1].array().square()).matrix());
    da = std::move(dz);
  }
  return da;
}

double gaussian_log_density(const VectorXd& x, const VectorXd& mean, const VectorXd& std) {
  const double quad = ((x - mean).array() / std.array()).square().sum();
  return -0.5 * quad - std.array().log().sum() -
         0.5 * static_cast<double>(x.size()) * std::log(2.0 * std::numbers::pi);
}

GaussianPolicy::GaussianPolicy(const PolicyConfig& config) : config_(config) {
  if (config.obs_dim < 1 || config.action_dim < 1)
    throw ConfigError("policy dimensions must be positive");
  std::vector<int> mean_sizes{config.obs_dim};
  mean_sizes.insert(mean_sizes.end(), config.hidden.begin(), config.hidden.end());
  std::vector<int> value_sizes = mean_sizes;
  mean_sizes.push_back(config.action_dim);
  value_sizes.push_back(1);
  mean_net_ = Mlp(mean_sizes);
  value_net_ = Mlp(value_sizes);
  log_std_ = VectorXd::Constant(config.action_dim,
                                std::clamp(config.log_std_init, kLogStdMin, kLogStdMax));
}

void GaussianPolicy::init(std::mt19937_64& rng) {
  mean_net_.init_orthogonal(rng, std::sqrt(2.0), config_.mean_out_gain);
  value_net_.init_orthogonal(rng, std::sqrt(2.0), 1.0);
  log_std_.setConstant(std::clamp(config_.log_std_init, kLogStdMin, kLogStdMax));
}

GaussianPolicy::Output GaussianPolicy::forward(const VectorXd& obs) const {
  if (obs.size() != config_.obs_dim)
    throw ShapeMismatch("observation has " + std::to_string(obs.size()) + " entries, expected " +
                        std::to_string(config_.obs_dim));
  Output out;
  out.mean = mean_net_.forward(obs);
  out.std = log_std_.array().exp();
  out.value = value_net_.forward(obs)(0, 0);
  return out;
}

ActionSample GaussianPolicy::sample(const VectorXd& obs, std::mt19937_64& rng) const {
  const Output o = forward(obs);
  std::normal_distribution<double> n01;
  VectorXd eps(config_.action_dim);
  for (Eigen::Index i = 0; i < eps.size(); ++i) eps[i] = n01(rng);
  ActionSample s;
  s.mean = o.mean;
  s.action = o.mean + o.std.cwiseProduct(eps);
  s.log_prob = -0.5 * eps.squaredNorm() - log_std_.sum() -
               0.5 * static_cast<double>(eps.size()) * std::log(2.0 * std::numbers::pi);
  s.value = o.value;
  return s;
}

double GaussianPolicy::log_prob(const VectorXd& obs, const VectorXd& action) const {
  const Output o = forward(obs);
  return gaussian_log_density(action, o.mean, o.std);
}

MatrixXd GaussianPolicy::means(const MatrixXd& obs) const { return mean_net_.forward(obs); }

VectorXd GaussianPolicy::values(const MatrixXd& obs) const {
  return value_net_.forward(obs).row(0).transpose();
}

VectorXd GaussianPolicy::log_probs(const MatrixXd& obs, const MatrixXd& actions) const {
  const MatrixXd mu = means(obs);
  const Eigen::ArrayXd inv_std = (-log_std_.array()).exp();
  const MatrixXd z = ((actions - mu).array().colwise() * inv_std).matrix();
  const double norm = log_std_.sum() + 0.5 * static_cast<double>(config_.action_dim) *
                                           std::log(2.0 * std::numbers::pi);
  return (-0.5 * z.colwise().squaredNorm().array() - norm).matrix().transpose();
}

Eigen::Index GaussianPolicy::num_policy_params() const {
  return mean_net_.num_params() + log_std_.size();
}

VectorXd GaussianPolicy::policy_params() const {
  VectorXd flat(num_policy_params());
  flat << mean_net_.params(), log_std_;
  return flat;
}

void GaussianPolicy::set_policy_params(const VectorXd& flat) {
  if (flat.size() != num_policy_params())
    throw ShapeMismatch("policy parameter vector has the wrong length");
  mean_net_.set_params(flat.head(mean_net_.num_params()));
  log_std_ = flat.tail(log_std_.size()).cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
}

VectorXd GaussianPolicy::log_prob_gradient(const MatrixXd& obs, const MatrixXd& actions,
                                           const VectorXd& weights) const {
  Mlp::Tape tape;
  const MatrixXd mu = mean_net_.forward(obs, &tape);
  const Eigen::ArrayXd inv_var = (-2.0 * log_std_.array()).exp();
  const double n = static_cast<double>(obs.cols());
  const MatrixXd diff = actions - mu;
  // d log pi / d mean = (a - mu) / sigma^2,  d log pi / d log_std = (a - mu)^2 / sigma^2 - 1.
  const MatrixXd d_mean =
      (diff.array().colwise() * inv_var).matrix() * weights.asDiagonal() / n;
  const VectorXd d_log_std =
      ((diff.array().square().colwise() * inv_var - 1.0).matrix() * weights) / n;
  VectorXd grad(num_policy_params());
  grad << mean_net_.backward(tape, d_mean), d_log_std;
  return grad;
}

VectorXd GaussianPolicy::value_loss_gradient(const MatrixXd& obs, const VectorXd& targets) const {
  Mlp::Tape tape;
  const MatrixXd v = value_net_.forward(obs, &tape);
  const MatrixXd d_out = (v - targets.transpose()) / static_cast<double>(obs.cols());
  return value_net_.backward(tape, d_out);
}

VectorXd GaussianPolicy::fisher_vector_product(const MatrixXd& obs, const VectorXd& v) const {
  return fisher_operator(obs)(v);
}

std::function<VectorXd(const VectorXd&)> GaussianPolicy::fisher_operator(
    const MatrixXd& obs) const {
  auto tape = std::make_shared<Mlp::Tape>();
  mean_net_.forward(obs, tape.get());
  const Eigen::ArrayXd inv_var = (-2.0 * log_std_.array()).exp();
  const double n = static_cast<double>(obs.cols());
  return [this, tape, inv_var, n](const VectorXd& v) -> VectorXd {
    if (v.size() != num_policy_params()) throw ShapeMismatch("Fisher product vector length");
    const Eigen::Index nm = mean_net_.num_params();
    const MatrixXd j_mean = mean_net_.jvp(*tape, v.head(nm));
    // Fisher metric of a diagonal Gaussian: 1/sigma^2 on the mean, 2 on log_std.
    const MatrixXd weighted = (j_mean.array().colwise() * inv_var).matrix() / n;
    VectorXd out(num_policy_params());
    out << mean_net_.backward(*tape, weighted), 2.0 * v.tail(log_std_.size());
    return out;
  };
}

double kl(const GaussianPolicy& old_policy, const GaussianPolicy& new_policy,
          const MatrixXd& obs) {
  const MatrixXd mu_old = old_policy.means(obs);
  const MatrixXd mu_new = new_policy.means(obs);
  const Eigen::ArrayXd ls_old = old_policy.log_std().array();
  const Eigen::ArrayXd ls_new = new_policy.log_std().array();
  const Eigen::ArrayXd var_old = (2.0 * ls_old).exp();
  const Eigen::ArrayXd inv_var_new = (-2.0 * ls_new).exp();
  const double per_state_const = (ls_new - ls_old + 0.5 * var_old * inv_var_new - 0.5).sum();
  const double mean_term =
      0.5 * ((mu_old - mu_new).array().square().colwise() * inv_var_new).sum() /
      static_cast<double>(obs.cols());
  return per_state_const + mean_term;
}

void GaussianPolicy::save(std::ostream& out) const {
  out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n'
      << "obs_dim " << config_.obs_dim << '\n'
      << "action_dim " << config_.action_dim << '\n'
      << "hidden " << config_.hidden.size();
  for (int h : config_.hidden) out << ' ' << h;
  out << '\n'
      << "log_std_init " << std::setprecision(17) << config_.log_std_init << '\n'
      << "mean_out_gain " << std::setprecision(17) << config_.mean_out_gain << '\n';
  write_vector(out, "mean_net", mean_net_.params());
  write_vector(out, "value_net", value_net_.params());
  write_vector(out, "log_std", log_std_);
}

GaussianPolicy GaussianPolicy::load(std::istream& in) {
  std::string magic, key;
  int version = 0;
  if (!(in >> magic >> version) || magic != kCheckpointMagic)
    throw ConfigError("not a policy checkpoint");
  if (version != kCheckpointVersion)
    throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  PolicyConfig cfg;
  std::size_t n_hidden = 0;
  if (!(in >> key >> cfg.obs_dim) || key != "obs_dim" || !(in >> key >> cfg.action_dim) ||
      key != "action_dim" || !(in >> key >> n_hidden) || key != "hidden")
    throw ConfigError("checkpoint: malformed layout header");
  cfg.hidden.resize(n_hidden);
  for (int& h : cfg.hidden)
    if (!(in >> h)) throw ConfigError("checkpoint: malformed hidden sizes");
  if (!(in >> key >> cfg.log_std_init) || key != "log_std_init" ||
      !(in >> key >> cfg.mean_out_gain) || key != "mean_out_gain")
    throw ConfigError("checkpoint: malformed initialisation header");
  GaussianPolicy p(cfg);
  p.mean_net_.set_params(read_vector(in, "mean_net", p.mean_net_.num_params()));
  p.value_net_.set_params(read_vector(in, "value_net", p.value_net_.num_params()));
  p.log_std_ = read_vector(in, "log_std", cfg.action_dim);
  return p;
}

}  // namespace safelayer::policy
