#include "safelayer/env.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "safelayer/errors.hpp"

namespace safelayer::env {

using robot::Pair;

const constraints::StateLayout& state_layout() {
  static const constraints::StateLayout layout = [] {
    constraints::StateLayout l;
    l.size = Layout::kSize;
    l.joint_positions = {{1, Layout::kElbow}};
    l.joint_velocity = Layout::kThetaDot;
    l.h_tau = Layout::kHtau;
    l.c_tau = Layout::kCtau;
    for (std::size_t k = 0; k < kNumPairs; ++k) {
      const auto base = Layout::kPairs + Layout::kPairStride * static_cast<Eigen::Index>(k);
      l.pairs.push_back({base, base + 1});
    }
    return l;
  }();
  return layout;
}

void EnvConfig::validate() const {
  if (!(dt > 0.0)) throw ConfigError("env.dt must be positive");
  if (max_steps < 1) throw ConfigError("env.max_steps must be at least 1");
  if (!(sample_half_range > 0.0)) throw ConfigError("env.sample_half_range must be positive");
  if (!(beta_coll > 0.0)) throw ConfigError("env.beta_coll must be positive");
  if (!(obstacle_radius >= 0.0)) throw ConfigError("env.obstacle_radius must be non-negative");
  if (!(obstacle_clearance >= 0.0))
    throw ConfigError("env.obstacle_clearance must be non-negative");
  if (max_obstacle_samples < 1) throw ConfigError("env.max_obstacle_samples must be at least 1");
  if (collision_substeps < 1) throw ConfigError("env.collision_substeps must be at least 1");
  robot.validate();
}

Reacher2D::Reacher2D(EnvConfig config) : config_(std::move(config)) {
  config_.validate();
  build_observation();
}

double Reacher2D::clip_elbow(double theta_elbow) {
  return std::clamp(theta_elbow, -std::numbers::pi, std::numbers::pi);
}

std::array<double, kNumPairs> Reacher2D::distances_at(const Vector2d& theta) const {
  std::array<double, kNumPairs> d{};
  for (std::size_t k = 0; k < kNumPairs; ++k)
    d[k] = robot::closest_pair(config_.robot, theta, obstacle(), robot::kAllPairs[k]).distance;
  return d;
}

const VectorXd& Reacher2D::reset(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> coord(-config_.sample_half_range,
                                               config_.sample_half_range);
  theta_.setZero();
  theta_dot_.setZero();
  steps_ = 0;
  done_ = false;
  target_ = {coord(rng), coord(rng)};
  int tries = 0;
  while (true) {
    obstacle_ = {coord(rng), coord(rng)};
    const auto d = distances_at(theta_);
    const double clear = config_.obstacle_clearance;
    if (std::all_of(d.begin(), d.end(), [clear](double v) { return v > 0.0 && v >= clear; }))
      break;
    if (++tries >= config_.max_obstacle_samples)
      throw SamplingExhausted("no collision-free obstacle after " + std::to_string(tries) +
                              " samples");
  }
  build_observation();
  return obs_;
}

const VectorXd& Reacher2D::reset(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return reset(rng);
}

void Reacher2D::set_state(const Vector2d& theta, const Vector2d& theta_dot,
                          const Vector2d& target, const Vector2d& obstacle) {
  theta_ = theta;
  theta_dot_ = theta_dot;
  target_ = target;
  obstacle_ = obstacle;
  steps_ = 0;
  done_ = false;
  build_observation();
}

StepResult Reacher2D::step(const Vector2d& action) {
  if (!action.allFinite()) throw NonFiniteAction("action has non-finite entries");
  if (done_) throw std::logic_error("step called on a finished episode; call reset first");

  const Vector2d start = theta_;
  Vector2d next(start[0] + action[0], clip_elbow(start[1] + action[1]));
  const Vector2d applied = next - start;

  bool collision = false;
  for (int k = 1; k <= config_.collision_substeps && !collision; ++k) {
    const double t = static_cast<double>(k) / config_.collision_substeps;
    const auto d = distances_at(start + t * applied);
    collision = std::any_of(d.begin(), d.end(), [](double v) { return v <= 0.0; });
  }

  next[0] = std::remainder(next[0], 2.0 * std::numbers::pi);
  theta_ = next;
  theta_dot_ = applied / config_.dt;
  ++steps_;
  build_observation();

  StepResult r;
  r.info.collision = collision;
  r.info.applied_step = applied;
  r.info.target_distance = obs_.segment<2>(Layout::kTarget).norm();
  r.info.r_dist = -r.info.target_distance;
  r.info.r_coll = collision ? -config_.collision_penalty * config_.beta_coll : 0.0;
  r.info.r_prox =
      r.info.target_distance <= config_.proximity_threshold ? config_.proximity_bonus : 0.0;
  r.reward = r.info.r_dist + r.info.r_coll + r.info.r_prox;
  r.terminated = collision;
  r.truncated = !collision && steps_ >= config_.max_steps;
  done_ = r.terminated || r.truncated;
  r.observation = obs_;
  return r;
}

void Reacher2D::build_observation() {
  const auto& rb = config_.robot;
  const auto kin = robot::forward_kinematics(rb, theta_);
  const auto dyn = robot::mass_matrix_and_bias(rb, theta_, theta_dot_);
  obs_.resize(Layout::kSize);
  obs_.segment<3>(Layout::kPfa) = kin.p_fa;
  obs_[Layout::kElbow] = theta_[1];
  obs_.segment<2>(Layout::kThetaDot) = theta_dot_;
  obs_.segment<3>(Layout::kPee) = kin.p_ee;
  obs_.segment<3>(Layout::kTarget) = Eigen::Vector3d(target_.x(), target_.y(), 0.0) - kin.p_ee;
  obs_.segment<3>(Layout::kObstacle) =
      Eigen::Vector3d(obstacle_.x(), obstacle_.y(), 0.0) - kin.p_ee;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 8; ++j) obs_[Layout::kHtau + 8 * i + j] = dyn.h_tau(i, j);
  obs_.segment<2>(Layout::kCtau) = dyn.c_tau;
  for (std::size_t k = 0; k < kNumPairs; ++k) {
    const Pair pair = robot::kAllPairs[k];
    const auto cp = robot::closest_pair(rb, theta_, obstacle(), pair);
    const auto base = Layout::kPairs + Layout::kPairStride * static_cast<Eigen::Index>(k);
    obs_[base] = cp.distance;
    obs_.segment<2>(base + 1) = robot::distance_jacobian_row(rb, theta_, pair, cp);
  }
}

}  // namespace safelayer::env
