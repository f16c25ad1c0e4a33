#include "safelayer/robot.hpp"

#include <algorithm>
#include <cmath>

#include "safelayer/errors.hpp"

namespace safelayer::robot {
namespace {

using Jacobian = Eigen::Matrix<double, 3, 2>;

Vector3d planar(double x, double y) { return {x, y, 0.0}; }

Vector3d z_cross(const Vector3d& r) { return {-r.y(), r.x(), 0.0}; }

// Linear velocity Jacobian of a point rigidly attached to the upper arm
// (on_forearm = false) or the forearm.
Jacobian point_jacobian(const Vector3d& p, const Vector3d& p_fa, bool on_forearm) {
  Jacobian J;
  J.col(0) = z_cross(p);
  J.col(1) = on_forearm ? z_cross(p - p_fa) : Vector3d::Zero();
  return J;
}

}  // namespace

void PlanarRobot::validate() const {
  if (!(l1 > 0.0 && l2 > 0.0)) throw ConfigError("robot link lengths must be positive");
  if (!(m1 > 0.0 && m2 > 0.0)) throw ConfigError("robot link masses must be positive");
  if (!(link_radius >= 0.0 && base_radius >= 0.0))
    throw ConfigError("robot collision radii must be non-negative");
}

Kinematics forward_kinematics(const PlanarRobot& robot, const Vector2d& theta) {
  const double a = theta[0], ab = theta[0] + theta[1];
  Kinematics k;
  k.p_fa = planar(robot.l1 * std::cos(a), robot.l1 * std::sin(a));
  k.p_ee = k.p_fa + planar(robot.l2 * std::cos(ab), robot.l2 * std::sin(ab));
  return k;
}

Dynamics mass_matrix_and_bias(const PlanarRobot& robot, const Vector2d& theta,
                              const Vector2d& theta_dot) {
  const Kinematics k = forward_kinematics(robot, theta);
  const Vector3d c1 = 0.5 * k.p_fa;
  const Vector3d c2 = 0.5 * (k.p_fa + k.p_ee);
  const Jacobian J1 = point_jacobian(c1, k.p_fa, false);
  const Jacobian J2 = point_jacobian(c2, k.p_fa, true);
  const Eigen::RowVector2d w1(1.0, 0.0), w2(1.0, 1.0);  // link angular rates

  Dynamics d;
  d.h_tau.setZero();
  // Joint/base-linear coupling: sum of m_k J_k' e for e = x, y.
  d.h_tau.leftCols<2>() =
      (robot.m1 * J1.topRows<2>().transpose() + robot.m2 * J2.topRows<2>().transpose());
  // Joint/base-yaw coupling: base yaw moves every point by z x r and spins both links.
  for (int i = 0; i < 2; ++i)
    d.h_tau(i, 5) = robot.m1 * J1.col(i).dot(z_cross(c1)) +
                    robot.m2 * J2.col(i).dot(z_cross(c2)) + robot.inertia1() * w1[i] +
                    robot.inertia2() * w2[i];
  d.h_tau.rightCols<2>() = robot.m1 * J1.transpose() * J1 + robot.m2 * J2.transpose() * J2 +
                           robot.inertia1() * w1.transpose() * w1 +
                           robot.inertia2() * w2.transpose() * w2;

  const double h = robot.m2 * robot.l1 * (0.5 * robot.l2) * std::sin(theta[1]);
  const double qd1 = theta_dot[0], qd2 = theta_dot[1];
  d.c_tau << -h * (2.0 * qd1 * qd2 + qd2 * qd2), h * qd1 * qd1;
  return d;
}

Vector2d joint_torque(const PlanarRobot& robot, const Vector2d& theta, const Vector2d& theta_dot,
                      const Vector2d& theta_ddot) {
  const Dynamics d = mass_matrix_and_bias(robot, theta, theta_dot);
  return d.joint_mass() * theta_ddot + d.c_tau;
}

double kinetic_energy(const PlanarRobot& robot, const Vector2d& theta,
                      const Vector2d& theta_dot) {
  const Dynamics d = mass_matrix_and_bias(robot, theta, Vector2d::Zero());
  return 0.5 * theta_dot.dot(d.joint_mass() * theta_dot);
}

std::string_view pair_name(Pair pair) {
  switch (pair) {
    case Pair::kUpperArmObstacle: return "upper_arm:obstacle";
    case Pair::kForearmObstacle: return "forearm:obstacle";
    case Pair::kEndEffectorBase: return "end_effector:base";
  }
  return "unknown";
}

ClosestPair closest_pair(const PlanarRobot& robot, const Vector2d& theta, const Disc& obstacle,
                         Pair pair) {
  const Kinematics k = forward_kinematics(robot, theta);
  Vector3d center, point;
  double radii = robot.link_radius;
  if (pair == Pair::kEndEffectorBase) {
    center.setZero();
    point = k.p_ee;
    radii += robot.base_radius;
  } else {
    center = planar(obstacle.center.x(), obstacle.center.y());
    const Vector3d a = pair == Pair::kUpperArmObstacle ? Vector3d::Zero() : k.p_fa;
    const Vector3d b = pair == Pair::kUpperArmObstacle ? k.p_fa : k.p_ee;
    const Vector3d ab = b - a;
    const double t = std::clamp((center - a).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
    point = a + t * ab;
    radii += obstacle.radius;
  }
  ClosestPair out;
  const Vector3d diff = point - center;
  const double gap = diff.norm();
  out.point = point;
  out.normal = gap > 0.0 ? Vector3d(diff / gap) : Vector3d::UnitX();
  out.distance = gap - radii;
  return out;
}

Vector2d distance_jacobian_row(const PlanarRobot& robot, const Vector2d& theta, Pair pair,
                               const ClosestPair& closest) {
  const Kinematics k = forward_kinematics(robot, theta);
  const Jacobian J = point_jacobian(closest.point, k.p_fa, pair != Pair::kUpperArmObstacle);
  return J.transpose() * closest.normal;
}

}  // namespace safelayer::robot
