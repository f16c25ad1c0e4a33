#include "safelayer/qp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "safelayer/errors.hpp"

namespace safelayer::qp {
namespace {

constexpr double kStepFraction = 0.99;
constexpr double kPivotTol = 1e-13;
// Lower bound on the complementarity target s_i z_i. Iterations that run past
// convergence would otherwise push z/s ratios past 1e20 and wreck the
// condensed factorization.
constexpr double kMuFloor = 1e-13;

bool all_finite(const VectorXd& v) { return v.allFinite(); }

// Relative pivot test on an LU factor. Partial pivoting never fails outright,
// so a structurally singular matrix shows up as a vanishing pivot.
bool pivots_ok(const MatrixXd& lu, double rel_tol = kPivotTol) {
  if (lu.rows() == 0) return true;
  const VectorXd d = lu.diagonal().cwiseAbs();
  const double hi = d.maxCoeff();
  return std::isfinite(hi) && hi > 0.0 && d.minCoeff() > rel_tol * hi;
}

struct Direction {
  VectorXd dx, ds, dz, dy;
};

// Newton system
//   [P 0 G' A'] [dx]   [r1]
//   [0 Z S  0 ] [ds] = [r2]
//   [G I 0  0 ] [dz]   [r3]
//   [A 0 0  0 ] [dy]   [r4]
class FullLuKkt {
 public:
  void factor(const Problem& p, const VectorXd& s, const VectorXd& z) {
    const Eigen::Index n = p.num_vars(), m = p.num_ineq(), e = p.num_eq();
    n_ = n;
    m_ = m;
    e_ = e;
    MatrixXd K = MatrixXd::Zero(n + 2 * m + e, n + 2 * m + e);
    K.topLeftCorner(n, n) = p.P;
    K.block(0, n + m, n, m) = p.G.transpose();
    K.block(0, n + 2 * m, n, e) = p.A.transpose();
    K.block(n, n, m, m) = z.asDiagonal();
    K.block(n, n + m, m, m) = s.asDiagonal();
    K.block(n + m, 0, m, n) = p.G;
    K.block(n + m, n, m, m).setIdentity();
    K.block(n + 2 * m, 0, e, n) = p.A;
    lu_.compute(K);
    if (!pivots_ok(lu_.matrixLU(), 0.0)) throw SingularKkt("KKT matrix is singular");
  }

  void solve(const VectorXd& r1, const VectorXd& r2, const VectorXd& r3,
             const VectorXd& r4, Direction& d) const {
    VectorXd rhs(n_ + 2 * m_ + e_);
    rhs << r1, r2, r3, r4;
    const VectorXd sol = lu_.solve(rhs);
    d.dx = sol.head(n_);
    d.ds = sol.segment(n_, m_);
    d.dz = sol.segment(n_ + m_, m_);
    d.dy = sol.tail(e_);
  }

 private:
  Eigen::PartialPivLU<MatrixXd> lu_;
  Eigen::Index n_ = 0, m_ = 0, e_ = 0;
};

// Same system after eliminating ds = r3 - G dx and dz = S^-1 (r2 - Z ds):
//   [P + G'WG  A'] [dx]   [r1 - G'(S^-1 r2 - W r3)]
//   [A         0 ] [dy] = [r4                     ],   W = S^-1 Z.
// Near convergence W spans many orders of magnitude and the reduced matrix
// can lose definiteness in floating point; the full system is factored then.
class CondensedKkt {
 public:
  void factor(const Problem& p, const VectorXd& s, const VectorXd& z) {
    use_full_ = false;
    try {
      factor_condensed(p, s, z);
    } catch (const SingularKkt&) {
      full_.factor(p, s, z);
      use_full_ = true;
    }
  }

  void solve(const VectorXd& r1, const VectorXd& r2, const VectorXd& r3,
             const VectorXd& r4, Direction& d) const {
    if (use_full_)
      full_.solve(r1, r2, r3, r4, d);
    else
      solve_condensed(r1, r2, r3, r4, d);
  }

 private:
  void factor_condensed(const Problem& p, const VectorXd& s, const VectorXd& z) {
    G_ = &p.G;
    z_ = z;
    inv_s_ = s.cwiseInverse();
    w_ = z.cwiseProduct(inv_s_);
    const Eigen::Index n = p.num_vars(), e = p.num_eq();
    MatrixXd K = p.P;
    K.noalias() += p.G.transpose() * w_.asDiagonal() * p.G;
    if (e == 0) {
      llt_.compute(K);
      use_llt_ = true;
      if (llt_.info() != Eigen::Success)
        throw SingularKkt("condensed KKT matrix is not positive definite");
      return;
    }
    MatrixXd M = MatrixXd::Zero(n + e, n + e);
    M.topLeftCorner(n, n) = K;
    M.topRightCorner(n, e) = p.A.transpose();
    M.bottomLeftCorner(e, n) = p.A;
    lu_.compute(M);
    use_llt_ = false;
    if (!pivots_ok(lu_.matrixLU(), 0.0)) throw SingularKkt("KKT matrix is singular");
  }

  void solve_condensed(const VectorXd& r1, const VectorXd& r2, const VectorXd& r3,
                       const VectorXd& r4, Direction& d) const {
    const VectorXd t = inv_s_.cwiseProduct(r2) - w_.cwiseProduct(r3);
    VectorXd rx = r1;
    rx.noalias() -= G_->transpose() * t;
    if (use_llt_) {
      d.dx = llt_.solve(rx);
      d.dy.resize(0);
    } else {
      VectorXd rhs(rx.size() + r4.size());
      rhs << rx, r4;
      const VectorXd sol = lu_.solve(rhs);
      d.dx = sol.head(rx.size());
      d.dy = sol.tail(r4.size());
    }
    d.ds = r3;
    d.ds.noalias() -= *G_ * d.dx;
    d.dz = inv_s_.cwiseProduct(r2 - z_.cwiseProduct(d.ds));
  }

  const MatrixXd* G_ = nullptr;
  VectorXd z_, inv_s_, w_;
  Eigen::LLT<MatrixXd> llt_;
  Eigen::PartialPivLU<MatrixXd> lu_;
  bool use_llt_ = true;
  FullLuKkt full_;
  bool use_full_ = false;
};

// Largest alpha in (0, 1] keeping v + alpha * dv >= 0.
double max_step(const VectorXd& v, const VectorXd& dv) {
  double alpha = 1.0;
  for (Eigen::Index i = 0; i < v.size(); ++i)
    if (dv[i] < 0.0) alpha = std::min(alpha, -v[i] / dv[i]);
  return alpha;
}

// Solves [P G' A'; G -I 0; A 0 0] [x; z; y] = [-q; h; b].
void solve_init_system(const Problem& p, KktSolver kind, VectorXd& x,
                       VectorXd& z, VectorXd& y) {
  const Eigen::Index n = p.num_vars(), m = p.num_ineq(), e = p.num_eq();
  if (kind == KktSolver::kFullLu) {
    MatrixXd K = MatrixXd::Zero(n + m + e, n + m + e);
    K.topLeftCorner(n, n) = p.P;
    K.block(0, n, n, m) = p.G.transpose();
    K.block(0, n + m, n, e) = p.A.transpose();
    K.block(n, 0, m, n) = p.G;
    K.block(n, n, m, m) = -MatrixXd::Identity(m, m);
    K.block(n + m, 0, e, n) = p.A;
    Eigen::PartialPivLU<MatrixXd> lu(K);
    if (!pivots_ok(lu.matrixLU()))
      throw SingularKkt("initialization system is singular");
    VectorXd rhs(n + m + e);
    rhs << -p.q, p.h, p.b;
    const VectorXd sol = lu.solve(rhs);
    x = sol.head(n);
    z = sol.segment(n, m);
    y = sol.tail(e);
  } else {
    // z = Gx - h eliminated: (P + G'G) x + A'y = -q + G'h, Ax = b.
    MatrixXd M = MatrixXd::Zero(n + e, n + e);
    M.topLeftCorner(n, n) = p.P;
    M.topLeftCorner(n, n).noalias() += p.G.transpose() * p.G;
    M.topRightCorner(n, e) = p.A.transpose();
    M.bottomLeftCorner(e, n) = p.A;
    Eigen::PartialPivLU<MatrixXd> lu(M);
    if (!pivots_ok(lu.matrixLU()))
      throw SingularKkt("initialization system is singular");
    VectorXd rhs(n + e);
    rhs.head(n) = -p.q;
    rhs.head(n).noalias() += p.G.transpose() * p.h;
    rhs.tail(e) = p.b;
    const VectorXd sol = lu.solve(rhs);
    x = sol.head(n);
    y = sol.tail(e);
    z = p.G * x - p.h;
  }
}

template <typename Kkt>
Solution run_interior_point(const Problem& p, int k_max, double early_exit_tol,
                            KktSolver kind) {
  const Eigen::Index m = p.num_ineq();
  Solution out;

  if (m == 0 && p.num_eq() == 0) {
    Eigen::LLT<MatrixXd> llt(p.P);
    if (llt.info() != Eigen::Success) throw SingularKkt("P is not positive definite");
    out.x = llt.solve(-p.q);
    out.s.resize(0);
    out.z.resize(0);
    out.y.resize(0);
    out.kkt_residual = kkt_residual(p, out.x, out.s, out.z, out.y);
    return out;
  }

  StartPoint start = init_point(p, kind);
  VectorXd x = std::move(start.x), s = std::move(start.s);
  VectorXd z = std::move(start.z), y = std::move(start.y);

  Kkt kkt;
  Direction aff, dir;
  int it = 0;
  // Without inequalities the initialization system already solves the
  // equality-constrained problem exactly.
  if (m > 0) {
    for (; it < k_max; ++it) {
      if (early_exit_tol > 0.0 && kkt_residual(p, x, s, z, y) < early_exit_tol) break;

      VectorXd r_dual = p.P * x + p.q;
      r_dual.noalias() += p.G.transpose() * z;
      r_dual.noalias() += p.A.transpose() * y;
      VectorXd r_in = p.G * x + s - p.h;
      VectorXd r_eq = p.A * x - p.b;
      const VectorXd sz = s.cwiseProduct(z);
      const double mu = sz.sum() / static_cast<double>(m);

      kkt.factor(p, s, z);

      // Predictor (affine scaling) direction.
      kkt.solve(-r_dual, -sz, -r_in, -r_eq, aff);
      const double alpha_aff = std::min(max_step(s, aff.ds), max_step(z, aff.dz));
      const double mu_aff =
          (s + alpha_aff * aff.ds).dot(z + alpha_aff * aff.dz) / static_cast<double>(m);
      const double sigma = mu > 0.0 ? std::pow(mu_aff / mu, 3) : 0.0;

      // Combined predictor-corrector direction.
      const VectorXd r2 = -sz - aff.ds.cwiseProduct(aff.dz) +
                          VectorXd::Constant(m, std::max(sigma * mu, kMuFloor));
      kkt.solve(-r_dual, r2, -r_in, -r_eq, dir);

      const double alpha = std::min(
          1.0, kStepFraction * std::min(max_step(s, dir.ds), max_step(z, dir.dz)));
      x += alpha * dir.dx;
      s += alpha * dir.ds;
      z += alpha * dir.dz;
      y += alpha * dir.dy;

      if (!all_finite(x) || !all_finite(s) || !all_finite(z) || !all_finite(y))
        throw NumericalBlowup("interior-point iterate became non-finite at iteration " +
                              std::to_string(it));
    }
  }

  out.kkt_residual = kkt_residual(p, x, s, z, y);
  out.iterations = it;
  out.x = std::move(x);
  out.s = std::move(s);
  out.z = std::move(z);
  out.y = std::move(y);
  return out;
}

Solution dispatch(const Problem& p, int k_max, double tol, KktSolver kind) {
  if (kind == KktSolver::kFullLu) return run_interior_point<FullLuKkt>(p, k_max, tol, kind);
  return run_interior_point<CondensedKkt>(p, k_max, tol, kind);
}

void check_same_shape(std::span<const Problem> problems) {
  if (problems.empty()) return;
  const auto& f = problems.front();
  for (std::size_t i = 1; i < problems.size(); ++i) {
    const auto& p = problems[i];
    if (p.num_vars() != f.num_vars() || p.num_ineq() != f.num_ineq() ||
        p.num_eq() != f.num_eq())
      throw ShapeMismatch("batch instance " + std::to_string(i) +
                          " has a different (n_x, n_in, n_eq) shape");
  }
}

}  // namespace

void Problem::validate() const {
  const Eigen::Index n = q.size();
  if (P.rows() != n || P.cols() != n)
    throw InvalidProblem("P must be n_x x n_x");
  if (G.rows() != h.size() || (G.rows() > 0 && G.cols() != n))
    throw InvalidProblem("G must be n_in x n_x with n_in = size(h)");
  if (A.rows() != b.size() || (A.rows() > 0 && A.cols() != n))
    throw InvalidProblem("A must be n_eq x n_x with n_eq = size(b)");
  if (!P.allFinite() || !q.allFinite() || !G.allFinite() || !h.allFinite() ||
      !A.allFinite() || !b.allFinite())
    throw InvalidProblem("problem data contains non-finite entries");
  if ((P - P.transpose()).cwiseAbs().maxCoeff() > 1e-10)
    throw InvalidProblem("P is not symmetric");
  if (n > 0 && Eigen::LLT<MatrixXd>(P).info() != Eigen::Success)
    throw InvalidProblem("P is not positive definite");
}

Problem Problem::projection(const VectorXd& target, MatrixXd G, VectorXd h,
                            MatrixXd A, VectorXd b) {
  const Eigen::Index n = target.size();
  Problem p;
  p.P = MatrixXd::Identity(n, n);
  p.q = -target;
  p.G = std::move(G);
  p.h = std::move(h);
  p.A = std::move(A);
  p.b = std::move(b);
  if (p.G.rows() == 0) p.G.resize(0, n);
  if (p.A.rows() == 0) p.A.resize(0, n);
  return p;
}

Problem Problem::projection(const VectorXd& target, MatrixXd G, VectorXd h) {
  return projection(target, std::move(G), std::move(h), MatrixXd(0, target.size()),
                    VectorXd(0));
}

StartPoint init_point(const Problem& p, KktSolver linear_solver) {
  StartPoint sp;
  VectorXd z;
  solve_init_system(p, linear_solver, sp.x, z, sp.y);
  const Eigen::Index m = p.num_ineq();
  if (m == 0) {
    sp.s.resize(0);
    sp.z.resize(0);
    return sp;
  }
  // Mehrotra's heuristic: lift s = -z and z to be non-negative, then add an
  // offset sized by their products so the start is near the central path
  // whatever the scale of the problem.
  VectorXd s_hat = -z, z_hat = z;
  s_hat.array() += std::max(-1.5 * s_hat.minCoeff(), 0.0);
  z_hat.array() += std::max(-1.5 * z_hat.minCoeff(), 0.0);
  const double gap = s_hat.dot(z_hat);
  if (gap > 0.0) {
    sp.s = s_hat.array() + 0.5 * gap / z_hat.sum();
    sp.z = z_hat.array() + 0.5 * gap / s_hat.sum();
  } else {
    // Degenerate start (all products zero): unit shift.
    const double alpha_p = z.maxCoeff();
    const double alpha_d = (-z).maxCoeff();
    sp.s = -z.array() + (1.0 + std::max(alpha_p, 0.0));
    sp.z = z.array() + (1.0 + std::max(alpha_d, 0.0));
  }
  return sp;
}

Solution solve(const Problem& problem, const SolverOptions& options) {
  return dispatch(problem, options.k_max, options.early_exit_tol, options.linear_solver);
}

Solution solve(const Problem& problem, int k_max) {
  SolverOptions opts;
  opts.k_max = k_max;
  return solve(problem, opts);
}

std::vector<Solution> solve_batch(std::span<const Problem> problems, int k_max) {
  check_same_shape(problems);
  std::vector<Solution> out(problems.size());
  const auto count = static_cast<std::ptrdiff_t>(problems.size());
  // Exceptions must not escape an OpenMP region; the first failure (by index)
  // is rethrown afterwards.
  std::vector<std::exception_ptr> errors(problems.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    try {
      out[i] = dispatch(problems[i], k_max, 0.0, KktSolver::kCondensed);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

std::vector<Solution> solve_batch_serial(std::span<const Problem> problems, int k_max) {
  check_same_shape(problems);
  std::vector<Solution> out;
  out.reserve(problems.size());
  for (const auto& p : problems) out.push_back(dispatch(p, k_max, 0.0, KktSolver::kFullLu));
  return out;
}

MatrixXd solution_gradient(const Problem& p, const Solution& sol) {
  constexpr double kStrict = 1e-7;
  constexpr double kAmbiguous = 1e-3;
  if (!(sol.kkt_residual < 1e-6))
    throw DegenerateActiveSet("solution is not converged (kkt_residual >= 1e-6)");
  const Eigen::Index n = p.num_vars(), m = p.num_ineq(), e = p.num_eq();

  // Classify each inequality by the larger of (s_i, z_i). A pair where both
  // are tiny, or where neither clearly dominates, has no well-defined
  // derivative.
  std::vector<Eigen::Index> active;
  for (Eigen::Index i = 0; i < m; ++i) {
    const double si = std::max(sol.s[i], 0.0), zi = std::max(sol.z[i], 0.0);
    const double hi = std::max(si, zi), lo = std::min(si, zi);
    if (hi <= kStrict || lo >= kAmbiguous * hi)
      throw DegenerateActiveSet("strict complementarity fails on inequality " +
                                std::to_string(i));
    if (zi > si) active.push_back(i);
  }

  // Differentiating the KKT conditions with the active set held fixed:
  //   P dx + G_act' dz_act + A' dy = -dq,  G_act dx = 0,  A dx = 0,
  // while inactive multipliers stay at zero.
  const auto k = static_cast<Eigen::Index>(active.size());
  MatrixXd K = MatrixXd::Zero(n + k + e, n + k + e);
  K.topLeftCorner(n, n) = p.P;
  for (Eigen::Index j = 0; j < k; ++j) {
    K.block(0, n + j, n, 1) = p.G.row(active[j]).transpose();
    K.block(n + j, 0, 1, n) = p.G.row(active[j]);
  }
  K.block(0, n + k, n, e) = p.A.transpose();
  K.block(n + k, 0, e, n) = p.A;

  Eigen::PartialPivLU<MatrixXd> lu(K);
  if (!pivots_ok(lu.matrixLU()))
    throw DegenerateActiveSet("active constraints are linearly dependent");
  MatrixXd rhs = MatrixXd::Zero(n + k + e, n);
  rhs.topRows(n) = -MatrixXd::Identity(n, n);
  return lu.solve(rhs).topRows(n);
}

double objective(const Problem& p, const VectorXd& x) {
  return 0.5 * x.dot(p.P * x) + p.q.dot(x);
}

double kkt_residual(const Problem& p, const VectorXd& x, const VectorXd& s,
                    const VectorXd& z, const VectorXd& y) {
  VectorXd r_dual = p.P * x + p.q;
  if (p.num_ineq() > 0) r_dual.noalias() += p.G.transpose() * z;
  if (p.num_eq() > 0) r_dual.noalias() += p.A.transpose() * y;
  double r = r_dual.cwiseAbs().maxCoeff();
  if (p.num_ineq() > 0) {
    r = std::max(r, (p.G * x + s - p.h).cwiseAbs().maxCoeff());
    r = std::max(r, s.cwiseProduct(z).cwiseAbs().maxCoeff());
  }
  if (p.num_eq() > 0) r = std::max(r, (p.A * x - p.b).cwiseAbs().maxCoeff());
  return r;
}

double max_violation(const Problem& p, const VectorXd& x) {
  double v = 0.0;
  if (p.num_ineq() > 0) v = std::max(v, (p.G * x - p.h).maxCoeff());
  if (p.num_eq() > 0) v = std::max(v, (p.A * x - p.b).cwiseAbs().maxCoeff());
  return v;
}

}  // namespace safelayer::qp
