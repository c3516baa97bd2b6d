#pragma once

#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

namespace preshape {

using SparseMatrix = Eigen::SparseMatrix<double>;
using Triplets = std::vector<Eigen::Triplet<double>>;

// A sum-of-squares objective E(x) = |r(x)|^2.
class LeastSquaresProblem {
 public:
  virtual ~LeastSquaresProblem() = default;

  virtual int parameter_count() const = 0;

  // Writes r(x) and, when `jacobian` is non-null, dr/dx. Returns false when x
  // is outside the domain (e.g. a vertex behind the camera); the solver then
  // treats the step as rejected.
  virtual bool evaluate(const Eigen::VectorXd& x, Eigen::VectorXd& residuals, SparseMatrix* jacobian) const = 0;
};

struct SolverOptions {
  int max_iterations = 50;
  double relative_tolerance = 1e-6;
  double initial_damping = 1e-4;
  double max_damping = 1e14;
};

struct SolverSummary {
  double initial_energy = 0.0;
  double final_energy = 0.0;
  int iterations = 0;
  int accepted_steps = 0;
  int rejected_steps = 0;
  // Energy after every accepted step, starting with the initial energy.
  std::vector<double> energy_history;
  bool converged = false;
};

// Levenberg-Marquardt with Marquardt (diagonal) scaling: damping x10 after a
// rejected step, /10 after an accepted one. Accepted steps never increase the
// energy. Throws preshape::Error if the starting point cannot be evaluated or
// has non-finite energy.
SolverSummary solve_least_squares(const LeastSquaresProblem& problem, Eigen::VectorXd& x,
                                  const SolverOptions& options = {});

double energy_of(const LeastSquaresProblem& problem, const Eigen::VectorXd& x);

}  // namespace preshape
