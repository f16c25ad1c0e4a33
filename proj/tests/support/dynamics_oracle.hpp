#pragma once

// Test-only dynamics oracle for the planar arm. Each link is a uniform line
// mass; kinetic energy is integrated along the links with Gauss-Legendre
// quadrature (exact, the integrand is quadratic in arc length), and torques
// follow from Lagrange's equations with every derivative taken by central
// differences.

#include <array>
#include <cmath>

#include <Eigen/Dense>

#include "safelayer/robot.hpp"

namespace safelayer::testing {

struct BaseTwist {
  Eigen::Vector3d linear = Eigen::Vector3d::Zero();
  Eigen::Vector3d angular = Eigen::Vector3d::Zero();
};

inline double line_mass_energy(const robot::PlanarRobot& r, const Eigen::Vector2d& q,
                               const Eigen::Vector2d& qd, const BaseTwist& base = {}) {
  static constexpr std::array<double, 3> nodes{-0.7745966692414834, 0.0, 0.7745966692414834};
  static constexpr std::array<double, 3> weights{5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0};
  const Eigen::Vector3d u1(std::cos(q[0]), std::sin(q[0]), 0.0);
  const Eigen::Vector3d u2(std::cos(q[0] + q[1]), std::sin(q[0] + q[1]), 0.0);
  const Eigen::Vector3d n1(-u1.y(), u1.x(), 0.0), n2(-u2.y(), u2.x(), 0.0);
  double energy = 0.0;
  for (int link = 0; link < 2; ++link) {
    const double len = link == 0 ? r.l1 : r.l2;
    const double density = (link == 0 ? r.m1 : r.m2) / len;
    for (int k = 0; k < 3; ++k) {
      const double s = 0.5 * len * (nodes[k] + 1.0);
      Eigen::Vector3d pos, vel;
      if (link == 0) {
        pos = s * u1;
        vel = s * qd[0] * n1;
      } else {
        pos = r.l1 * u1 + s * u2;
        vel = r.l1 * qd[0] * n1 + s * (qd[0] + qd[1]) * n2;
      }
      vel += base.linear + base.angular.cross(pos);
      energy += 0.5 * len * weights[k] * 0.5 * density * vel.squaredNorm();
    }
  }
  return energy;
}

/// Generalized momenta dT/dqd by central differences (T is quadratic in qd,
/// so the difference quotient is exact up to rounding).
inline Eigen::Vector2d oracle_momentum(const robot::PlanarRobot& r, const Eigen::Vector2d& q,
                                       const Eigen::Vector2d& qd) {
  const double e = 1e-3;
  Eigen::Vector2d p;
  for (int i = 0; i < 2; ++i) {
    Eigen::Vector2d a = qd, b = qd;
    a[i] += e;
    b[i] -= e;
    p[i] = (line_mass_energy(r, q, a) - line_mass_energy(r, q, b)) / (2.0 * e);
  }
  return p;
}

/// tau = d/dt dT/dqd - dT/dq along the trajectory q + qd t + qdd t^2 / 2.
inline Eigen::Vector2d oracle_torque(const robot::PlanarRobot& r, const Eigen::Vector2d& q,
                                     const Eigen::Vector2d& qd, const Eigen::Vector2d& qdd) {
  const double dt = 1e-5;
  auto momentum_at = [&](double t) {
    return oracle_momentum(r, q + qd * t + 0.5 * qdd * t * t, qd + qdd * t);
  };
  const Eigen::Vector2d dpdt = (momentum_at(dt) - momentum_at(-dt)) / (2.0 * dt);
  const double e = 1e-6;
  Eigen::Vector2d dTdq;
  for (int i = 0; i < 2; ++i) {
    Eigen::Vector2d a = q, b = q;
    a[i] += e;
    b[i] -= e;
    dTdq[i] = (line_mass_energy(r, a, qd) - line_mass_energy(r, b, qd)) / (2.0 * e);
  }
  return dpdt - dTdq;
}

/// Mixed second derivative d^2 T / (dqd_joint d nu_base) where nu_base is one
/// of the six base velocity components (linear xyz, angular xyz).
inline double oracle_base_coupling(const robot::PlanarRobot& r, const Eigen::Vector2d& q,
                                   int joint, int base_index) {
  const double e = 1e-2;
  auto energy = [&](double a, double v) {
    Eigen::Vector2d qd = Eigen::Vector2d::Zero();
    qd[joint] = a;
    BaseTwist tw;
    if (base_index < 3)
      tw.linear[base_index] = v;
    else
      tw.angular[base_index - 3] = v;
    return line_mass_energy(r, q, qd, tw);
  };
  return (energy(e, e) - energy(e, -e) - energy(-e, e) + energy(-e, -e)) / (4.0 * e * e);
}

/// Brute-force surface distance between a link segment [a, b] inflated by
/// radius and a disc, by dense sampling of the segment.
inline double sampled_segment_distance(const Eigen::Vector2d& a, const Eigen::Vector2d& b,
                                       const Eigen::Vector2d& center, double radii,
                                       int samples = 20001) {
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < samples; ++i) {
    const double t = static_cast<double>(i) / (samples - 1);
    best = std::min(best, (a + t * (b - a) - center).norm());
  }
  return best - radii;
}

}  // namespace safelayer::testing
