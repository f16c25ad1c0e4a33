#pragma once

// Two-link planar arm moving in the xy plane, perpendicular to gravity.
// Joint angles are (shoulder, elbow); the shoulder sits at the origin and the
// zero configuration stretches the arm along +x.

#include <string_view>

#include <Eigen/Dense>

namespace safelayer::robot {

using Eigen::Matrix2d;
using Eigen::Vector2d;
using Eigen::Vector3d;

struct PlanarRobot {
  double l1 = 0.1;  // upper arm length [m]
  double l2 = 0.1;  // forearm length [m]
  double m1 = 0.1;  // link masses [kg]
  double m2 = 0.1;
  double link_radius = 0.01;  // capsule radius around each link [m]
  double base_radius = 0.02;  // disc around the shoulder [m]

  /// Centroidal inertias of uniform thin rods, m l^2 / 12.
  double inertia1() const { return m1 * l1 * l1 / 12.0; }
  double inertia2() const { return m2 * l2 * l2 / 12.0; }

  /// Throws ConfigError unless lengths, masses and radii are positive.
  void validate() const;
};

struct Kinematics {
  Vector3d p_fa;  // elbow joint, base of the forearm
  Vector3d p_ee;  // forearm tip
};

Kinematics forward_kinematics(const PlanarRobot& robot, const Vector2d& theta);

/// Joint rows of the floating-base equations of motion, with generalized
/// velocities ordered (base linear xyz, base angular xyz, shoulder, elbow).
/// Base velocities are zero, so C_tau only contains the joint Coriolis and
/// centrifugal terms; gravity acts out of plane and contributes nothing.
struct Dynamics {
  Eigen::Matrix<double, 2, 8> h_tau;
  Vector2d c_tau;

  Matrix2d joint_mass() const { return h_tau.rightCols<2>(); }
};

Dynamics mass_matrix_and_bias(const PlanarRobot& robot, const Vector2d& theta,
                              const Vector2d& theta_dot);

/// Inverse dynamics tau = M(q) qdd + C(q, qd) of the fixed-base arm.
Vector2d joint_torque(const PlanarRobot& robot, const Vector2d& theta, const Vector2d& theta_dot,
                      const Vector2d& theta_ddot);

/// Total kinetic energy of both links.
double kinetic_energy(const PlanarRobot& robot, const Vector2d& theta, const Vector2d& theta_dot);

struct Disc {
  Vector2d center;
  double radius = 0.0;
};

enum class Pair { kUpperArmObstacle, kForearmObstacle, kEndEffectorBase };
inline constexpr Pair kAllPairs[] = {Pair::kUpperArmObstacle, Pair::kForearmObstacle,
                                     Pair::kEndEffectorBase};
std::string_view pair_name(Pair pair);

struct ClosestPair {
  double distance = 0.0;  // surface distance, negative when overlapping
  Vector3d normal;        // unit vector from the other body toward point
  Vector3d point;         // closest point on the link axis (or the tip)
};

/// For the end-effector pair the obstacle argument is ignored: the tip,
/// inflated by the link radius, is measured against the base disc.
ClosestPair closest_pair(const PlanarRobot& robot, const Vector2d& theta, const Disc& obstacle,
                         Pair pair);

/// Row n' J(q, p) restricted to the joint columns, so that
/// d/dt distance = row . theta_dot for a static obstacle.
Vector2d distance_jacobian_row(const PlanarRobot& robot, const Vector2d& theta, Pair pair,
                               const ClosestPair& closest);

}  // namespace safelayer::robot
