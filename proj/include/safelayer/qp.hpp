#pragma once

// Dense convex QP layer:
//
//   minimize    1/2 x'Px + q'x
//   subject to  Gx <= h
//               Ax  = b
//
// solved with a primal-dual predictor-corrector interior-point method. Batch
// solving runs a fixed iteration count so every instance follows the same
// control flow; single solves may stop early once the KKT residual is tiny.

#include <iosfwd>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace safelayer::qp {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct Problem {
  MatrixXd P;
  VectorXd q;
  MatrixXd G;  // n_in x n_x
  VectorXd h;
  MatrixXd A;  // n_eq x n_x
  VectorXd b;

  Eigen::Index num_vars() const { return q.size(); }
  Eigen::Index num_ineq() const { return h.size(); }
  Eigen::Index num_eq() const { return b.size(); }

  /// Throws InvalidProblem on inconsistent shapes, asymmetric P or non-finite
  /// entries. Positive definiteness is checked with a Cholesky attempt.
  void validate() const;

  /// Closest-point problem min 1/2 |x - target|^2, i.e. P = I and q = -target.
  static Problem projection(const VectorXd& target, MatrixXd G, VectorXd h,
                            MatrixXd A, VectorXd b);
  static Problem projection(const VectorXd& target, MatrixXd G, VectorXd h);
};

struct Solution {
  VectorXd x;  // primal optimum
  VectorXd s;  // inequality slacks
  VectorXd z;  // inequality duals
  VectorXd y;  // equality duals
  double kkt_residual = 0.0;
  int iterations = 0;
};

struct StartPoint {
  VectorXd x, s, z, y;
};

/// How the Newton systems are solved. FullLu factors the complete unsymmetric
/// KKT matrix; Condensed eliminates slacks and inequality duals and factors
/// the (n_x + n_eq) reduced system. Both produce the same iterates up to
/// rounding; FullLu is the reference kernel used in tests.
enum class KktSolver { kFullLu, kCondensed };

struct SolverOptions {
  int k_max = 10;
  /// Stop once kkt_residual drops below this value; <= 0 disables early exit.
  double early_exit_tol = 1e-11;
  KktSolver linear_solver = KktSolver::kCondensed;
};

inline constexpr int kDefaultIterations = 10;

StartPoint init_point(const Problem& problem,
                      KktSolver linear_solver = KktSolver::kFullLu);

Solution solve(const Problem& problem, const SolverOptions& options);
Solution solve(const Problem& problem, int k_max = kDefaultIterations);

/// Solves every problem with exactly k_max iterations. Instances are
/// distributed over OpenMP threads; output order matches input order and
/// results do not depend on the thread count. Throws ShapeMismatch if the
/// problems do not share (n_x, n_in, n_eq).
std::vector<Solution> solve_batch(std::span<const Problem> problems,
                                  int k_max = kDefaultIterations);

/// Serial reference for solve_batch: one full-KKT LU solve per instance,
/// same fixed iteration count.
std::vector<Solution> solve_batch_serial(std::span<const Problem> problems,
                                         int k_max = kDefaultIterations);

/// Jacobian dx*/dq from implicit differentiation of the KKT conditions at a
/// converged solution. Throws DegenerateActiveSet when strict complementarity
/// or linear independence of the active rows fails.
MatrixXd solution_gradient(const Problem& problem, const Solution& solution);

double objective(const Problem& problem, const VectorXd& x);

/// Max-norm of stationarity, primal (inequality and equality) and
/// complementarity residuals.
double kkt_residual(const Problem& problem, const VectorXd& x,
                    const VectorXd& s, const VectorXd& z, const VectorXd& y);

/// Largest violation max(max_i(Gx - h)_i, |Ax - b|_inf, 0).
double max_violation(const Problem& problem, const VectorXd& x);

// Flat text dump, one `name=v1,v2,...` record per line, matrices row-major.
void write_problem(std::ostream& out, const Problem& problem);
void write_solution(std::ostream& out, const Solution& solution);
Problem read_problem(std::istream& in);
Solution read_solution(std::istream& in);

}  // namespace safelayer::qp
