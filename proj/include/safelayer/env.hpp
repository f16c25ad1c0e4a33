#pragma once

// Planar reacher: the arm starts stretched along +x, a target and a disc
// obstacle are dropped uniformly in a square around the base, and each step
// applies a commanded joint increment. The episode ends on collision
// (terminated) or after max_steps (truncated).

#include <array>
#include <cstdint>
#include <random>

#include <Eigen/Dense>

#include "safelayer/constraints.hpp"
#include "safelayer/robot.hpp"

namespace safelayer::env {

using Eigen::Vector2d;
using Eigen::VectorXd;

struct EnvConfig {
  double dt = 0.01;
  int max_steps = 200;
  double sample_half_range = 0.27;  // m, target and obstacle in [-R, R]^2
  double beta_coll = 1.0;
  double collision_penalty = 20.0;  // r_coll = -collision_penalty * beta_coll
  double proximity_threshold = 0.03;
  double proximity_bonus = 2.0;
  double obstacle_radius = 0.04;
  double obstacle_clearance = 0.01;  // m, resets re-sample obstacles closer than this
  int max_obstacle_samples = 1000;
  int collision_substeps = 8;  // joint-space checks per step
  robot::PlanarRobot robot;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

struct StepInfo {
  bool collision = false;
  double target_distance = 0.0;
  double r_dist = 0.0;
  double r_coll = 0.0;
  double r_prox = 0.0;
  Vector2d applied_step = Vector2d::Zero();
};

struct StepResult {
  VectorXd observation;
  double reward = 0.0;
  bool terminated = false;
  bool truncated = false;
  StepInfo info;
};

inline constexpr std::size_t kNumPairs = std::size(robot::kAllPairs);

/// Observation layout (42 entries):
///   0  p_fa (3)          3  theta_elbow      4  theta_dot (2)
///   6  p_ee (3)          9  p_t - p_ee (3)  12  p_o - p_ee (3)
///  15  H_tau (2x8, row-major)              31  C_tau (2)
///  33  per monitored pair: d_l, (J' n_l) (2)
struct Layout {
  static constexpr Eigen::Index kPfa = 0, kElbow = 3, kThetaDot = 4, kPee = 6, kTarget = 9,
                                kObstacle = 12, kHtau = 15, kCtau = 31, kPairs = 33,
                                kPairStride = 3;
  static constexpr Eigen::Index kSize = kPairs + kPairStride * static_cast<Eigen::Index>(kNumPairs);
};

/// Index map consumed by the constraint recipes.
const constraints::StateLayout& state_layout();

class Reacher2D {
 public:
  explicit Reacher2D(EnvConfig config);

  /// Draws target and obstacle from `rng`; the obstacle is redrawn while it
  /// overlaps the arm. Throws SamplingExhausted after max_obstacle_samples.
  const VectorXd& reset(std::mt19937_64& rng);
  const VectorXd& reset(std::uint64_t seed);

  /// Throws NonFiniteAction on NaN or infinite entries, std::logic_error if
  /// the episode has already ended.
  StepResult step(const Vector2d& action);

  /// Places the arm directly (tests and tools); the observation is rebuilt.
  void set_state(const Vector2d& theta, const Vector2d& theta_dot, const Vector2d& target,
                 const Vector2d& obstacle);

  const EnvConfig& config() const { return config_; }
  const VectorXd& observation() const { return obs_; }
  const Vector2d& theta() const { return theta_; }
  const Vector2d& theta_dot() const { return theta_dot_; }
  const Vector2d& target() const { return target_; }
  robot::Disc obstacle() const { return {obstacle_, config_.obstacle_radius}; }
  int steps() const { return steps_; }
  bool done() const { return done_; }

  /// Surface distances of the monitored pairs at the current configuration.
  std::array<double, kNumPairs> distances() const { return distances_at(theta_); }
  std::array<double, kNumPairs> distances_at(const Vector2d& theta) const;

  static double clip_elbow(double theta_elbow);

 private:
  void build_observation();

  EnvConfig config_;
  Vector2d theta_ = Vector2d::Zero();
  Vector2d theta_dot_ = Vector2d::Zero();
  Vector2d target_ = Vector2d::Zero();
  Vector2d obstacle_ = Vector2d::Zero();
  int steps_ = 0;
  bool done_ = false;
  VectorXd obs_;
};

}  // namespace safelayer::env
