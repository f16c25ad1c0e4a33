#include "safelayer/constraints.hpp"

#include <algorithm>
#include <cmath>

#include "safelayer/errors.hpp"

namespace safelayer::constraints {
namespace {

void require_entry(Index index, Index count, const StateLayout& layout, const char* what) {
  if (index < 0 || index + count > layout.size)
    throw LayoutError(std::string("state layout has no ") + what + " entries");
}

void check_limits(const VectorXd& lo, const VectorXd& hi, const char* what) {
  if (lo.size() != hi.size()) throw BadLimits(std::string(what) + " limits differ in length");
  for (Index j = 0; j < lo.size(); ++j)
    if (!(lo[j] < hi[j]))
      throw BadLimits(std::string(what) + " limits of joint " + std::to_string(j) +
                      " are not ordered");
}

}  // namespace

void ConstraintBlock::emit(const VectorXd& state, Eigen::Ref<MatrixXd> G_out,
                           Eigen::Ref<VectorXd> h_out) const {
  switch (kind) {
    case BlockKind::kConstant:
      G_out = G;
      h_out = h;
      break;
    case BlockKind::kAffineInState:
      G_out = G;
      h_out = h + H * state;
      break;
    case BlockKind::kAuxiliary:
    case BlockKind::kConditional: {
      MatrixXd g(rows, G_out.cols());
      VectorXd v(rows);
      recipe(state, g, v);
      G_out = g;
      h_out = v;
      break;
    }
  }
}

bool ConstraintBlock::active(const VectorXd& state) const {
  return ((test_offset - test_H * state).array() >= 0.0).all();
}

ConstraintSet::ConstraintSet(Index n_x, Index state_dim, std::vector<ConstraintBlock> blocks)
    : n_x_(n_x), state_dim_(state_dim), blocks_(std::move(blocks)) {
  for (const auto& b : blocks_) {
    if (b.rows <= 0) throw LayoutError("block '" + b.label + "' has no rows");
    const bool fixed_g = b.kind == BlockKind::kConstant || b.kind == BlockKind::kAffineInState;
    if (fixed_g && (b.G.rows() != b.rows || b.G.cols() != n_x || b.h.size() != b.rows))
      throw LayoutError("block '" + b.label + "' does not have " + std::to_string(n_x) +
                        " columns");
    if (b.kind == BlockKind::kAffineInState && (b.H.rows() != b.rows || b.H.cols() != state_dim))
      throw LayoutError("block '" + b.label + "' selection does not match the state size");
    if ((b.kind == BlockKind::kAuxiliary || b.kind == BlockKind::kConditional) && !b.recipe)
      throw LayoutError("block '" + b.label + "' has no recipe");
    if (b.equality && b.kind != BlockKind::kConstant)
      throw LayoutError("block '" + b.label + "': only constant blocks can be equalities");
    if (b.kind == BlockKind::kConditional) {
      if (b.test_H.cols() != state_dim || b.test_H.rows() != b.test_offset.size())
        throw LayoutError("block '" + b.label + "' activation test does not match the state");
      n_cond_ += b.rows;
    } else if (b.equality) {
      n_eq_ += b.rows;
    } else {
      n_base_ += b.rows;
    }
  }
  for (const auto& b : blocks_)
    if (b.kind == BlockKind::kConditional &&
        (b.substitute_first < 0 || b.substitute_first + b.rows > n_base_))
      throw LayoutError("block '" + b.label + "' substitutes rows outside the base block");
}

Assembled ConstraintSet::assemble(const VectorXd& state, std::vector<bool>* active) const {
  if (state.size() != state_dim_)
    throw LayoutError("state has " + std::to_string(state.size()) + " entries, expected " +
                      std::to_string(state_dim_));
  Assembled out;
  out.G.resize(num_ineq(), n_x_);
  out.h.resize(num_ineq());
  out.A.resize(n_eq_, n_x_);
  out.b.resize(n_eq_);
  out.relaxable.assign(static_cast<std::size_t>(num_ineq()), false);
  if (active) active->clear();

  Index row = 0, eq_row = 0;
  for (const auto& b : blocks_) {
    if (b.kind == BlockKind::kConditional) continue;
    if (b.equality) {
      b.emit(state, out.A.middleRows(eq_row, b.rows), out.b.segment(eq_row, b.rows));
      eq_row += b.rows;
    } else {
      b.emit(state, out.G.middleRows(row, b.rows), out.h.segment(row, b.rows));
      std::fill_n(out.relaxable.begin() + row, b.rows, b.relaxable);
      row += b.rows;
    }
  }
  for (const auto& b : blocks_) {
    if (b.kind != BlockKind::kConditional) continue;
    const bool on = b.active(state);
    if (active) active->push_back(on);
    if (on) {
      b.emit(state, out.G.middleRows(row, b.rows), out.h.segment(row, b.rows));
      std::fill_n(out.relaxable.begin() + row, b.rows, b.relaxable);
    } else {
      out.G.middleRows(row, b.rows) = out.G.middleRows(b.substitute_first, b.rows);
      out.h.segment(row, b.rows) = out.h.segment(b.substitute_first, b.rows);
      std::copy_n(out.relaxable.begin() + b.substitute_first, b.rows,
                  out.relaxable.begin() + row);
    }
    row += b.rows;
  }
  return out;
}

Assembled relaxed(const Assembled& c) {
  Assembled r = c;
  for (std::size_t i = 0; i < r.relaxable.size(); ++i)
    if (r.relaxable[i]) r.h[static_cast<Index>(i)] = std::max(r.h[static_cast<Index>(i)], 0.0);
  return r;
}

double null_step_violation(const Assembled& c) {
  return std::max(c.h.size() ? (-c.h).maxCoeff() : 0.0,
                  c.b.size() ? c.b.cwiseAbs().maxCoeff() : 0.0);
}

ConstraintBlock velocity_block(double dt, const VectorXd& qd_min, const VectorXd& qd_max) {
  if (!(dt > 0.0)) throw BadLimits("time step must be positive");
  check_limits(qd_min, qd_max, "velocity");
  const Index n = qd_min.size();
  ConstraintBlock b;
  b.kind = BlockKind::kConstant;
  b.label = "velocity";
  b.rows = 2 * n;
  b.G.resize(2 * n, n);
  b.G << MatrixXd::Identity(n, n), -MatrixXd::Identity(n, n);
  b.h.resize(2 * n);
  b.h << dt * qd_max, -dt * qd_min;
  return b;
}

ConstraintBlock position_block(const VectorXd& theta_min, const VectorXd& theta_max,
                               const StateLayout& layout) {
  check_limits(theta_min, theta_max, "position");
  if (layout.joint_positions.empty())
    throw LayoutError("state layout has no joint position entries");
  const Index n = theta_min.size();
  const auto k = static_cast<Index>(layout.joint_positions.size());
  ConstraintBlock b;
  b.kind = BlockKind::kAffineInState;
  b.label = "position";
  b.rows = 2 * k;
  b.G = MatrixXd::Zero(2 * k, n);
  b.h.resize(2 * k);
  b.H = MatrixXd::Zero(2 * k, layout.size);
  for (Index r = 0; r < k; ++r) {
    const auto& jp = layout.joint_positions[r];
    require_entry(jp.index, 1, layout, "joint position");
    if (jp.joint < 0 || jp.joint >= n) throw LayoutError("joint index out of range");
    b.G(r, jp.joint) = 1.0;
    b.h[r] = theta_max[jp.joint];
    b.H(r, jp.index) = -1.0;
    b.G(k + r, jp.joint) = -1.0;
    b.h[k + r] = -theta_min[jp.joint];
    b.H(k + r, jp.index) = 1.0;
  }
  return b;
}

ConstraintBlock torque_block(double dt, const VectorXd& tau_min, const VectorXd& tau_max,
                             const StateLayout& layout, bool relax) {
  if (!(dt > 0.0)) throw BadLimits("time step must be positive");
  check_limits(tau_min, tau_max, "torque");
  const Index n = tau_min.size();
  const Index cols = 6 + n;
  require_entry(layout.h_tau, n * cols, layout, "mass matrix");
  require_entry(layout.c_tau, n, layout, "bias");
  require_entry(layout.joint_velocity, n, layout, "joint velocity");

  ConstraintBlock b;
  b.kind = BlockKind::kAuxiliary;
  b.label = "torque";
  b.rows = 2 * n;
  b.recipe = [=, h_tau = layout.h_tau, c_tau = layout.c_tau, qd = layout.joint_velocity](
                 const VectorXd& s, MatrixXd& G, VectorXd& h) {
    const MatrixXd M =
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
            s.data() + h_tau, n, cols)
            .rightCols(n);
    // tau(0) = C - M qd / dt
    const VectorXd tau0 = s.segment(c_tau, n) - M * s.segment(qd, n) / dt;
    G.resize(2 * n, n);
    G << M / (dt * dt), -M / (dt * dt);
    h.resize(2 * n);
    h << tau_max - tau0, tau0 - tau_min;
    if (relax) h = h.cwiseMax(0.0);
  };
  return b;
}

ConstraintBlock collision_block(std::size_t pair, double xi, double d_m, double d_M, double dt,
                                const StateLayout& layout, Index substitute_first, bool relax) {
  if (!(d_m < d_M)) throw BadThresholds("collision thresholds need d_m < d_M");
  if (!(dt > 0.0)) throw BadLimits("time step must be positive");
  if (pair >= layout.pairs.size())
    throw LayoutError("state layout has no entries for pair " + std::to_string(pair));
  const auto entries = layout.pairs[pair];
  require_entry(entries.distance, 1, layout, "distance");
  require_entry(entries.jacobian, 1, layout, "distance Jacobian");
  ConstraintBlock b;
  b.kind = BlockKind::kConditional;
  b.label = "collision[" + std::to_string(pair) + "]";
  b.rows = 1;
  b.substitute_first = substitute_first;
  b.relaxable = !relax;
  b.test_offset = VectorXd::Constant(1, d_M);
  b.test_H = MatrixXd::Zero(1, layout.size);
  b.test_H(0, entries.distance) = 1.0;
  b.recipe = [=](const VectorXd& s, MatrixXd& G, VectorXd& h) {
    const Index n = G.cols();
    G = -s.segment(entries.jacobian, n).transpose();
    const double d = s[entries.distance];
    h.resize(1);
    h[0] = dt * xi * (d - d_m) / (d_M - d_m);
    if (relax) h[0] = std::max(h[0], 0.0);
  };
  return b;
}

void ReacherLimits::validate() const {
  if (!(qd_max > 0.0)) throw ConfigError("constraints.qd_max must be positive");
  if (!(tau_max > 0.0)) throw ConfigError("constraints.tau_max must be positive");
  if (!(elbow_limit > 0.0)) throw ConfigError("constraints.elbow_limit must be positive");
  if (!(xi > 0.0)) throw ConfigError("constraints.xi must be positive");
  if (!(d_m < d_M)) throw ConfigError("constraints.d_m must be smaller than constraints.d_M");
}

ConstraintSet reacher_constraints(const ReacherLimits& limits, double dt,
                                  const StateLayout& layout) {
  limits.validate();
  const Index n = 2;
  const VectorXd qd = VectorXd::Constant(n, limits.qd_max);
  const VectorXd tau = VectorXd::Constant(n, limits.tau_max);
  const VectorXd theta_lim = VectorXd::Constant(n, limits.elbow_limit);

  std::vector<ConstraintBlock> blocks;
  blocks.push_back(velocity_block(dt, -qd, qd));
  blocks.push_back(position_block(-theta_lim, theta_lim, layout));
  blocks.push_back(torque_block(dt, -tau, tau, layout, limits.relax_torque));
  const Index velocity_rows = blocks.front().rows;
  for (std::size_t k = 0; k < layout.pairs.size(); ++k)
    blocks.push_back(collision_block(k, limits.xi, limits.d_m, limits.d_M, dt, layout,
                                     static_cast<Index>(k) % velocity_rows,
                                     !limits.collision_recovery));
  return ConstraintSet(n, layout.size, std::move(blocks));
}

}  // namespace safelayer::constraints
