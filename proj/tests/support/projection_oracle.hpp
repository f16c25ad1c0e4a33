#pragma once

// Test-only references for the safety layer: exact projection by active-set
// enumeration and its central-difference Jacobian.

#include <optional>

#include <Eigen/Dense>

#include "safelayer/constraints.hpp"
#include "support/qp_oracle.hpp"

namespace safelayer::testing {

inline std::optional<OracleSolution> oracle_projection(const constraints::Assembled& c,
                                                       const Eigen::VectorXd& a) {
  return enumerate_active_sets(qp::Problem::projection(a, c.G, c.h, c.A, c.b), 1e-12);
}

/// True when every inequality is either slack by more than `margin` or active
/// with multiplier above `margin`, so the projection is smooth within a
/// `margin`-ball around `a`.
inline bool strictly_complementary(const constraints::Assembled& c, const OracleSolution& s,
                                   double margin) {
  const Eigen::VectorXd slack = c.h - c.G * s.x;
  for (Eigen::Index i = 0; i < slack.size(); ++i) {
    const auto it = std::find(s.active.begin(), s.active.end(), static_cast<int>(i));
    if (it != s.active.end()) {
      if (s.z_active[it - s.active.begin()] <= margin) return false;
    } else if (slack[i] <= margin) {
      return false;
    }
  }
  return true;
}

inline std::optional<Eigen::MatrixXd> oracle_jacobian_fd(const constraints::Assembled& c,
                                                         const Eigen::VectorXd& a, double step) {
  const Eigen::Index n = a.size();
  Eigen::MatrixXd J(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    Eigen::VectorXd plus = a, minus = a;
    plus[j] += step;
    minus[j] -= step;
    const auto p = oracle_projection(c, plus), m = oracle_projection(c, minus);
    if (!p || !m) return std::nullopt;
    J.col(j) = (p->x - m->x) / (2.0 * step);
  }
  return J;
}

}  // namespace safelayer::testing
