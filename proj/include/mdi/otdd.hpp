#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "mdi/dataset.hpp"

namespace mdi {

/// Mean and low-rank-plus-shrinkage covariance of one class:
/// cov = factor * factor^T + delta * I. A class with fewer than two samples
/// degenerates to mean-only (empty factor, delta = 0).
struct ClassMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd factor;  // d x r, r = sample count (0 when mean-only)
  double delta = 0.0;
  int count = 0;
};

/// Moments of the sample rows (n x d) with shrinkage delta.
ClassMoments compute_moments(const Eigen::MatrixXd& samples, double delta);

/// Squared 2-Wasserstein distance between Gaussians given dense symmetric
/// PSD covariances: |m1-m2|^2 + tr(C1 + C2 - 2 (C1^1/2 C2 C1^1/2)^1/2).
/// Rejects asymmetric input; negative eigenvalues are floored at zero.
double gaussian_w2_sq(const Eigen::VectorXd& m1, const Eigen::MatrixXd& c1,
                      const Eigen::VectorXd& m2, const Eigen::MatrixXd& c2);

/// Same quantity through the low-rank representation; never materializes a
/// d x d matrix. Handles mean-only degenerate sides.
double gaussian_w2_sq(const ClassMoments& a, const ClassMoments& b);

struct TransportPlan {
  Eigen::MatrixXd pi;  // n x m, nonnegative
  Eigen::VectorXd a, b;
  double cost = 0.0;             // <pi, C>, the sharp transport cost
  double cost_regularized = 0.0;  // adds eps * KL(pi | a x b); equals cost
                                  // for exact solutions
  double epsilon = 0.0;
  int iterations = 0;
  double residual = 0.0;  // L1 marginal violation at exit
  bool converged = true;
};

/// Throws unless row/column sums match the marginals within tol and all
/// entries are nonnegative.
void validate_plan(const TransportPlan& plan, double tol = 1e-6);

/// Entropic OT in the log domain with damped simultaneous potential updates
/// (both sides half-step from the same previous iterate), which converges
/// where the undamped simultaneous scheme oscillates and keeps the solve
/// exactly symmetric under swapping the two sides. Non-convergence is
/// reported through the flag, not an error.
TransportPlan sinkhorn(const Eigen::MatrixXd& cost, const Eigen::VectorXd& a,
                       const Eigen::VectorXd& b, double eps,
                       int max_iter = 5000, double tol = 1e-9);

/// As above but warm-started: f/g carry potentials in and out, for
/// epsilon-scaling schedules.
TransportPlan sinkhorn_core(const Eigen::MatrixXd& cost,
                            const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                            double eps, int max_iter, double tol,
                            Eigen::VectorXd& f, Eigen::VectorXd& g);

/// Exact OT via the transportation simplex (MODI) with perturbed marginals
/// against degeneracy; flows are re-solved on the optimal basis with the
/// original marginals. Requires n*m <= 1e4 and balanced marginals.
TransportPlan exact_ot(const Eigen::MatrixXd& cost, const Eigen::VectorXd& a,
                       const Eigen::VectorXd& b);

struct OtddConfig {
  double epsilon = 0.1;  // relative to the max entry of the scaled cost
  int max_points = 700;
  double delta = 1e-4;
  std::uint64_t seed = 1;
  int max_iter = 5000;
  double tol = 1e-9;
  bool use_exact = false;  // exact_ot route (small instances / oracles)
  std::string ledger_csv;  // appended when non-empty
};

struct OtddDiagnostics {
  int points_a = 0, points_b = 0;
  bool converged = true;
  int iterations = 0;
  std::vector<std::string> warnings;  // mean-only class fallbacks
};

/// Optimal Transport Dataset Distance: ground cost |x-x'|^2 plus the
/// Bures-Wasserstein distance between the class moments of the two labels;
/// outer distance = sqrt of the (debiased) transport cost. The entropic
/// route subtracts half of each self-transport cost so that
/// otdd(A,A) == 0 and the epsilon bias largely cancels.
double otdd(const LabeledDataset& a, const LabeledDataset& b,
            const OtddConfig& cfg, OtddDiagnostics* diag = nullptr);

}  // namespace mdi
