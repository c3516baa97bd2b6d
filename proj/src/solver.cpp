#include "preshape/solver.hpp"

#include <cmath>
#include <limits>
#include <memory>

#include <Eigen/Cholesky>
#include <Eigen/SparseCholesky>

#include "preshape/errors.hpp"

namespace preshape {

namespace {

// Dense factorization is faster below this many unknowns.
constexpr int kDenseLimit = 400;

class NormalEquations {
 public:
  NormalEquations(const SparseMatrix& J, const Eigen::VectorXd& r) {
    gradient_ = J.transpose() * r;
    if (J.cols() <= kDenseLimit) {
      dense_ = Eigen::MatrixXd(J.transpose() * J);
      diag_ = dense_.diagonal();
    } else {
      sparse_ = SparseMatrix(J.transpose() * J);
      diag_ = sparse_.diagonal();
    }
    const double floor = std::max(1e-12, 1e-12 * diag_.maxCoeff());
    diag_ = diag_.cwiseMax(floor);
  }

  bool solve(double damping, Eigen::VectorXd& step) const {
    if (sparse_.size() == 0 && dense_.size() > 0) {
      Eigen::MatrixXd A = dense_;
      A.diagonal() += damping * diag_;
      Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
      if (ldlt.info() != Eigen::Success) return false;
      step = ldlt.solve(-gradient_);
    } else {
      SparseMatrix A = sparse_;
      for (Eigen::Index i = 0; i < A.cols(); ++i) A.coeffRef(i, i) += damping * diag_(i);
      Eigen::SimplicialLDLT<SparseMatrix> ldlt(A);
      if (ldlt.info() != Eigen::Success) return false;
      step = ldlt.solve(-gradient_);
    }
    return step.allFinite();
  }

 private:
  Eigen::VectorXd gradient_;
  Eigen::VectorXd diag_;
  Eigen::MatrixXd dense_;
  SparseMatrix sparse_;
};

}  // namespace

double energy_of(const LeastSquaresProblem& problem, const Eigen::VectorXd& x) {
  Eigen::VectorXd r;
  if (!problem.evaluate(x, r, nullptr)) return std::numeric_limits<double>::infinity();
  return r.squaredNorm();
}

SolverSummary solve_least_squares(const LeastSquaresProblem& problem, Eigen::VectorXd& x,
                                  const SolverOptions& options) {
  SolverSummary summary;
  Eigen::VectorXd r;
  SparseMatrix J;
  if (!problem.evaluate(x, r, &J)) throw Error("least squares: initial point outside the domain");
  double energy = r.squaredNorm();
  if (!std::isfinite(energy)) throw Error("least squares: non-finite initial energy");

  summary.initial_energy = energy;
  summary.energy_history.push_back(energy);
  if (x.size() == 0 || J.nonZeros() == 0) {
    summary.final_energy = energy;
    summary.converged = true;
    return summary;
  }

  double damping = options.initial_damping;
  auto normal = std::make_unique<NormalEquations>(J, r);
  Eigen::VectorXd step, trial, trial_r;
  while (summary.iterations < options.max_iterations) {
    ++summary.iterations;
    bool accepted = false;
    double trial_energy = std::numeric_limits<double>::infinity();
    if (normal->solve(damping, step)) {
      trial = x + step;
      if (problem.evaluate(trial, trial_r, nullptr)) trial_energy = trial_r.squaredNorm();
      accepted = std::isfinite(trial_energy) && trial_energy < energy;
    }
    if (!accepted) {
      ++summary.rejected_steps;
      damping *= 10.0;
      if (damping > options.max_damping) {
        summary.converged = true;
        break;
      }
      continue;
    }

    ++summary.accepted_steps;
    const double relative_change = (energy - trial_energy) / std::max(energy, std::numeric_limits<double>::min());
    x = trial;
    energy = trial_energy;
    summary.energy_history.push_back(energy);
    damping = std::max(damping / 10.0, 1e-15);
    if (relative_change < options.relative_tolerance || energy < 1e-24) {
      summary.converged = true;
      break;
    }
    problem.evaluate(x, r, &J);
    normal = std::make_unique<NormalEquations>(J, r);
  }
  summary.final_energy = energy;
  return summary;
}

}  // namespace preshape
