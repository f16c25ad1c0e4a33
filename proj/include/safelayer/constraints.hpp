#pragma once

// Per-step linear constraints on the joint step x = delta theta, assembled
// from the (extended) observation vector into fixed-shape G x <= h, A x = b.
//
// Blocks come in four kinds:
//   Constant       G, h fixed for the whole motion (velocity limits).
//   AffineInState  G fixed, h = h0 + H s with H a 0/+-1 selection (positions).
//   Auxiliary      G, h computed from dynamics entries appended to s (torques).
//   Conditional    rows that only apply when an activation test holds
//                  (collision avoidance); otherwise base rows are repeated in
//                  their place so the assembled shape never changes.

#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace safelayer::constraints {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Where each quantity the recipes read lives in the observation vector.
/// Missing entries are -1.
struct StateLayout {
  struct JointPosition {
    int joint = 0;
    Index index = -1;
  };
  struct PairEntries {
    Index distance = -1;  // d_l
    Index jacobian = -1;  // first of n_joints entries of J' n_l
  };

  Index size = 0;
  std::vector<JointPosition> joint_positions;  // limited joints only
  Index joint_velocity = -1;                   // n_joints entries
  Index h_tau = -1;                            // n_joints x (6 + n_joints), row-major
  Index c_tau = -1;                            // n_joints entries
  std::vector<PairEntries> pairs;
};

enum class BlockKind { kConstant, kAffineInState, kAuxiliary, kConditional };

struct ConstraintBlock {
  using Recipe = std::function<void(const VectorXd& state, MatrixXd& G, VectorXd& h)>;

  BlockKind kind = BlockKind::kConstant;
  std::string label;
  Index rows = 0;
  bool equality = false;  // constant blocks only: rows go to A x = b

  MatrixXd G;  // constant and affine blocks
  VectorXd h;  // constant offset of the right-hand side
  MatrixXd H;  // affine blocks: h(s) = h + H s

  Recipe recipe;  // auxiliary and conditional blocks

  // Conditional blocks: active iff test_offset - test_H s >= 0 elementwise;
  // when inactive the base rows [substitute_first, substitute_first + rows)
  // are emitted instead.
  VectorXd test_offset;
  MatrixXd test_H;
  Index substitute_first = 0;

  // Negative right-hand sides of these rows may be raised to 0 when the set
  // otherwise excludes the null step.
  bool relaxable = false;

  void emit(const VectorXd& state, Eigen::Ref<MatrixXd> G_out, Eigen::Ref<VectorXd> h_out) const;
  bool active(const VectorXd& state) const;
};

struct Assembled {
  MatrixXd G;
  VectorXd h;
  MatrixXd A;
  VectorXd b;
  std::vector<bool> relaxable;  // per inequality row, empty for none
};

/// Copy with the negative right-hand sides of relaxable rows raised to 0.
Assembled relaxed(const Assembled& c);
/// Largest violation of the assembled constraints by x = 0.
double null_step_violation(const Assembled& c);

class ConstraintSet {
 public:
  /// Throws LayoutError if a block's shape disagrees with n_x or state_dim, or
  /// a conditional block's substitute rows fall outside the base inequalities.
  ConstraintSet(Index n_x, Index state_dim, std::vector<ConstraintBlock> blocks);

  Index num_vars() const { return n_x_; }
  Index state_dim() const { return state_dim_; }
  Index num_ineq() const { return n_base_ + n_cond_; }
  Index num_eq() const { return n_eq_; }
  const std::vector<ConstraintBlock>& blocks() const { return blocks_; }

  /// Base inequality blocks in declaration order, then one slot per
  /// conditional block. `active`, when given, receives one flag per
  /// conditional block.
  Assembled assemble(const VectorXd& state, std::vector<bool>* active = nullptr) const;

 private:
  Index n_x_, state_dim_;
  Index n_base_ = 0, n_cond_ = 0, n_eq_ = 0;
  std::vector<ConstraintBlock> blocks_;
};

/// [I; -I] x <= [dt qd_max; -dt qd_min]. Throws BadLimits unless qd_min < qd_max.
ConstraintBlock velocity_block(double dt, const VectorXd& qd_min, const VectorXd& qd_max);

/// For each limited joint j in the layout: x_j <= theta_max_j - theta_j and
/// -x_j <= theta_j - theta_min_j. Throws LayoutError if the layout lists no
/// joint positions, BadLimits unless theta_min < theta_max.
ConstraintBlock position_block(const VectorXd& theta_min, const VectorXd& theta_max,
                               const StateLayout& layout);

/// tau_min <= tau(x) <= tau_max with tau(x) = M x / dt^2 + C - M qd / dt, M the
/// joint columns of H_tau. With `relax`, each right-hand side is raised to at
/// least 0 so that x = 0 stays feasible.
ConstraintBlock torque_block(double dt, const VectorXd& tau_min, const VectorXd& tau_max,
                             const StateLayout& layout, bool relax = true);

/// Velocity damping for monitored pair `pair`:
///   -(J'n)' x <= dt xi (d - d_m) / (d_M - d_m),
/// active when d <= d_M. With `relax` the right-hand side is raised to 0 when
/// d < d_m so that x = 0 stays feasible; without it the row demands a
/// recovery step and is marked relaxable. Throws BadThresholds unless
/// d_m < d_M.
ConstraintBlock collision_block(std::size_t pair, double xi, double d_m, double d_M, double dt,
                                const StateLayout& layout, Index substitute_first,
                                bool relax = true);

struct ReacherLimits {
  double qd_max = 6.283185307179586;  // rad/s, both joints
  double tau_max = 5.0;               // N m, both joints
  double elbow_limit = 3.141592653589793;
  double xi = 1.0;   // m/s
  double d_m = 0.01;  // m
  double d_M = 0.05;  // m
  bool relax_torque = true;
  bool collision_recovery = true;  // push back below d_m instead of holding

  /// Throws ConfigError on non-positive limits or d_m >= d_M.
  void validate() const;
};

/// Velocity (4 rows), elbow position (2), torque (4) and one collision row per
/// monitored pair; the k-th collision row substitutes velocity row k.
ConstraintSet reacher_constraints(const ReacherLimits& limits, double dt,
                                  const StateLayout& layout);

}  // namespace safelayer::constraints
