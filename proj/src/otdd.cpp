#include "mdi/otdd.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mdi/common.hpp"
#include "mdi/rng.hpp"

namespace mdi {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

constexpr int kDim = kImageSize * kImageSize;

}  // namespace

// ---- class moments ---------------------------------------------------------

ClassMoments compute_moments(const MatrixXd& samples, double delta) {
  check(samples.rows() >= 1, "moments: no samples");
  check(delta >= 0.0, "moments: negative shrinkage");
  ClassMoments m;
  m.count = static_cast<int>(samples.rows());
  const int n = m.count;
  const int d = static_cast<int>(samples.cols());
  m.mean = samples.colwise().mean();
  if (n < 2) {
    // covariance undefined: mean-only fallback, zero covariance
    m.factor.resize(d, 0);
    m.delta = 0.0;
    return m;
  }
  MatrixXd centered = samples.rowwise() - m.mean.transpose();
  m.delta = delta;
  if (n <= d) {
    m.factor = centered.transpose() / std::sqrt(static_cast<double>(n));
  } else {
    // keep the factor rank at most d
    MatrixXd cov =
        centered.transpose() * centered / static_cast<double>(n);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(cov);
    check(es.info() == Eigen::Success, "moments: eigendecomposition failed");
    VectorXd ev = es.eigenvalues().cwiseMax(0.0);
    m.factor = es.eigenvectors() * ev.cwiseSqrt().asDiagonal();
  }
  return m;
}

// ---- Bures-Wasserstein ------------------------------------------------------

double gaussian_w2_sq(const VectorXd& m1, const MatrixXd& c1,
                      const VectorXd& m2, const MatrixXd& c2) {
  check(c1.rows() == c1.cols() && c2.rows() == c2.cols() &&
            c1.rows() == c2.rows() && m1.size() == c1.rows() &&
            m2.size() == m1.size(),
        "w2: dimension mismatch");
  double tol1 = 1e-8 * (1.0 + c1.cwiseAbs().maxCoeff());
  double tol2 = 1e-8 * (1.0 + c2.cwiseAbs().maxCoeff());
  check((c1 - c1.transpose()).cwiseAbs().maxCoeff() <= tol1,
        "w2: first covariance is not symmetric");
  check((c2 - c2.transpose()).cwiseAbs().maxCoeff() <= tol2,
        "w2: second covariance is not symmetric");
  Eigen::SelfAdjointEigenSolver<MatrixXd> es1(c1);
  check(es1.info() == Eigen::Success, "w2: eigendecomposition failed");
  VectorXd ev1 = es1.eigenvalues().cwiseMax(0.0);
  MatrixXd sqrt1 = es1.eigenvectors() * ev1.cwiseSqrt().asDiagonal() *
                   es1.eigenvectors().transpose();
  MatrixXd inner = sqrt1 * c2 * sqrt1;
  // symmetrize against round-off before the second decomposition
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<MatrixXd> es2(inner);
  check(es2.info() == Eigen::Success, "w2: eigendecomposition failed");
  double cross = es2.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  double w2 = (m1 - m2).squaredNorm() + c1.trace() + c2.trace() - 2.0 * cross;
  return std::max(0.0, w2);
}

namespace {

// Deterministic total order so gaussian_w2_sq(a, b) is evaluated with a
// canonical argument order: W2 is symmetric, and the bitwise-equal results
// make the assembled cost matrices exactly transpose-symmetric.
bool moments_before(const ClassMoments& a, const ClassMoments& b) {
  if (a.count != b.count) return a.count < b.count;
  if (a.delta != b.delta) return a.delta < b.delta;
  for (int i = 0; i < a.mean.size(); ++i)
    if (a.mean[i] != b.mean[i]) return a.mean[i] < b.mean[i];
  if (a.factor.cols() != b.factor.cols())
    return a.factor.cols() < b.factor.cols();
  for (int j = 0; j < a.factor.cols(); ++j)
    for (int i = 0; i < a.factor.rows(); ++i)
      if (a.factor(i, j) != b.factor(i, j))
        return a.factor(i, j) < b.factor(i, j);
  return false;  // equal
}

double w2_lowrank_ordered(const ClassMoments& a, const ClassMoments& b) {
  const int d = static_cast<int>(a.mean.size());
  const int r1 = static_cast<int>(a.factor.cols());
  const int r2 = static_cast<int>(b.factor.cols());
  const double d1 = a.delta, d2 = b.delta;
  double tr1 = a.factor.squaredNorm() + d * d1;
  double tr2 = b.factor.squaredNorm() + d * d2;

  // cross = tr (C1^1/2 C2 C1^1/2)^1/2 with C = F F^T + delta I, computed
  // from the Gram matrix of K = [C1^1/2 F2, sqrt(d2) F1]: the nonzero
  // eigenvalues of K K^T are those of K^T K, and the rest of the spectrum
  // of the inner matrix is exactly d1*d2.
  double cross = 0.0;
  const int rho = r1 + r2;
  if (rho == 0) {
    cross = d * std::sqrt(d1 * d2);
  } else {
    MatrixXd ktk(rho, rho);
    if (r1 == 0) {
      // C1 = d1 I, so K = [sqrt(d1) F2]
      ktk = d1 * (b.factor.transpose() * b.factor);
    } else {
      Eigen::BDCSVD<MatrixXd> svd(
          a.factor, Eigen::ComputeThinU | Eigen::ComputeThinV);
      VectorXd sig = svd.singularValues();
      MatrixXd p = svd.matrixU().transpose() * b.factor;  // r1 x r2
      VectorXd sig2 = sig.array().square();
      // G^T G = P^T diag(sig^2) P + d1 F2^T F2
      MatrixXd gtg = p.transpose() * sig2.asDiagonal() * p +
                     d1 * (b.factor.transpose() * b.factor);
      // G^T H = sqrt(d2) P^T diag(sqrt(sig^2+d1) * sig) V^T
      VectorXd mix = ((sig2.array() + d1).sqrt() * sig.array()).matrix();
      MatrixXd gth = std::sqrt(d2) *
                     (p.transpose() * mix.asDiagonal() *
                      svd.matrixV().transpose());
      // H^T H = d2 V diag(sig^2) V^T
      MatrixXd hth =
          d2 * (svd.matrixV() * sig2.asDiagonal() * svd.matrixV().transpose());
      ktk.topLeftCorner(r2, r2) = gtg;
      ktk.topRightCorner(r2, r1) = gth;
      ktk.bottomLeftCorner(r1, r2) = gth.transpose();
      ktk.bottomRightCorner(r1, r1) = hth;
    }
    ktk = 0.5 * (ktk + ktk.transpose());
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(ktk);
    check(es.info() == Eigen::Success, "w2: gram eigendecomposition failed");
    VectorXd s = es.eigenvalues().cwiseMax(0.0);
    const double dd = d1 * d2;
    int top = std::min(rho, d);
    // eigenvalues come out ascending; the top min(rho, d) are the ones that
    // can exceed dd, the remaining directions sit exactly at dd
    for (int i = rho - top; i < rho; ++i) cross += std::sqrt(s[i] + dd);
    cross += (d - top) * std::sqrt(dd);
  }
  double w2 = (a.mean - b.mean).squaredNorm() + tr1 + tr2 - 2.0 * cross;
  return std::max(0.0, w2);
}

}  // namespace

double gaussian_w2_sq(const ClassMoments& a, const ClassMoments& b) {
  check(a.mean.size() == b.mean.size(), "w2: dimension mismatch");
  return moments_before(b, a) ? w2_lowrank_ordered(b, a)
                              : w2_lowrank_ordered(a, b);
}

// ---- transport plans --------------------------------------------------------

void validate_plan(const TransportPlan& plan, double tol) {
  check(plan.pi.rows() == plan.a.size() && plan.pi.cols() == plan.b.size(),
        "plan: shape mismatch");
  check(plan.pi.minCoeff() >= 0.0, "plan: negative coupling entry");
  VectorXd row = plan.pi.rowwise().sum();
  VectorXd col = plan.pi.colwise().sum();
  check((row - plan.a).cwiseAbs().maxCoeff() <= tol,
        "plan: row sums violate the source marginal");
  check((col - plan.b).cwiseAbs().maxCoeff() <= tol,
        "plan: column sums violate the target marginal");
}

namespace {

void check_marginals(const VectorXd& a, const VectorXd& b) {
  check(a.size() >= 1 && b.size() >= 1, "ot: empty marginals");
  check(a.minCoeff() > 0.0 && b.minCoeff() > 0.0,
        "ot: marginals must be strictly positive");
  check(std::abs(a.sum() - b.sum()) <= 1e-9 * std::max(1.0, a.sum()),
        "ot: marginals are not balanced");
}

// Shared log-sum-exp so every potential update uses the identical reduction
// order; __attribute__((noinline)) keeps one code path for both row and
// column sweeps, which makes the solver exactly swap-symmetric.
__attribute__((noinline)) double lse_line(const double* cost, long stride,
                                          int len, const double* shifted,
                                          double inv_eps) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < len; ++k) {
    double t = shifted[k] - cost[static_cast<long>(k) * stride] * inv_eps;
    if (t > mx) mx = t;
  }
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (int k = 0; k < len; ++k) {
    double t = shifted[k] - cost[static_cast<long>(k) * stride] * inv_eps;
    s += std::exp(t - mx);
  }
  return mx + std::log(s);
}

}  // namespace

TransportPlan sinkhorn_core(const MatrixXd& cost, const VectorXd& a,
                            const VectorXd& b, double eps, int max_iter,
                            double tol, VectorXd& f, VectorXd& g) {
  const int n = static_cast<int>(a.size());
  const int m = static_cast<int>(b.size());
  check(cost.rows() == n && cost.cols() == m, "sinkhorn: cost shape mismatch");
  check(cost.allFinite(), "sinkhorn: non-finite cost");
  check(cost.minCoeff() >= 0.0, "sinkhorn: negative cost");
  check(eps > 0.0, "sinkhorn: eps must be positive");
  check_marginals(a, b);
  if (f.size() != n) f = VectorXd::Zero(n);
  if (g.size() != m) g = VectorXd::Zero(m);
  VectorXd la = a.array().log();
  VectorXd lb = b.array().log();
  const double inv_eps = 1.0 / eps;

  TransportPlan plan;
  plan.a = a;
  plan.b = b;
  plan.epsilon = eps;
  VectorXd fn(n), gn(m), p(n), q(m);
  double res = std::numeric_limits<double>::infinity();
  int it = 0;
  // column-major storage: column j is contiguous, row i has stride n
  const double* cdata = cost.data();
  while (it < max_iter) {
    ++it;
    for (int j = 0; j < m; ++j) q[j] = g[j] * inv_eps + lb[j];
    for (int i = 0; i < n; ++i) p[i] = f[i] * inv_eps + la[i];
    // symmetric half-step: both candidates read the previous iterate and the
    // potentials move halfway. Unlike the plain simultaneous update (which
    // two-cycles) this damped form converges, and it treats rows and columns
    // identically, so swapping the inputs transposes the solve bitwise.
    for (int i = 0; i < n; ++i)
      fn[i] = -eps * lse_line(cdata + i, n, m, q.data(), inv_eps);
    for (int j = 0; j < m; ++j)
      gn[j] = -eps *
              lse_line(cdata + static_cast<long>(j) * n, 1, n, p.data(),
                       inv_eps);
    for (int i = 0; i < n; ++i) f[i] = 0.5 * (f[i] + fn[i]);
    for (int j = 0; j < m; ++j) g[j] = 0.5 * (g[j] + gn[j]);
    if (it % 5 == 0 || it == max_iter) {
      for (int j = 0; j < m; ++j) q[j] = g[j] * inv_eps + lb[j];
      for (int i = 0; i < n; ++i) p[i] = f[i] * inv_eps + la[i];
      res = 0.0;
      VectorXd colsum = VectorXd::Zero(m);
      for (int i = 0; i < n; ++i) {
        double rowsum = 0.0;
        for (int j = 0; j < m; ++j) {
          double v = std::exp(p[i] + q[j] - cost(i, j) * inv_eps);
          rowsum += v;
          colsum[j] += v;
        }
        res += std::abs(rowsum - a[i]);
      }
      for (int j = 0; j < m; ++j) res += std::abs(colsum[j] - b[j]);
      if (res < tol) break;
    }
  }
  plan.iterations = it;
  plan.residual = res;
  plan.converged = res < tol;
  plan.pi.resize(n, m);
  for (int j = 0; j < m; ++j) q[j] = g[j] * inv_eps + lb[j];
  for (int i = 0; i < n; ++i) p[i] = f[i] * inv_eps + la[i];
  double sharp = 0.0, kl = 0.0;
  for (int j = 0; j < m; ++j)
    for (int i = 0; i < n; ++i) {
      double lp = p[i] + q[j] - cost(i, j) * inv_eps;
      double v = std::exp(lp);
      plan.pi(i, j) = v;
      sharp += v * cost(i, j);
      if (v > 0.0) kl += v * (lp - la[i] - lb[j]) - v;
    }
  kl += 1.0;  // sum pi ~ 1; KL(pi | a x b) = sum pi log(pi/ab) - pi + ab
  plan.cost = sharp;
  plan.cost_regularized = sharp + eps * kl;
  return plan;
}

TransportPlan sinkhorn(const MatrixXd& cost, const VectorXd& a,
                       const VectorXd& b, double eps, int max_iter,
                       double tol) {
  VectorXd f, g;
  return sinkhorn_core(cost, a, b, eps, max_iter, tol, f, g);
}

// ---- exact transportation simplex -------------------------------------------

namespace {

struct BasisArc {
  int i, j;
  double flow;
};

}  // namespace

TransportPlan exact_ot(const MatrixXd& cost, const VectorXd& a,
                       const VectorXd& b) {
  const int n = static_cast<int>(a.size());
  const int m = static_cast<int>(b.size());
  check(static_cast<long>(n) * m <= 10000, "exact_ot: instance too large");
  check(cost.rows() == n && cost.cols() == m, "exact_ot: cost shape mismatch");
  check(cost.allFinite(), "exact_ot: non-finite cost");
  check_marginals(a, b);

  // perturbed marginals guarantee a nondegenerate starting basis
  const double scale_a = a.sum();
  const double pert = scale_a * 1e-11 / static_cast<double>(n);
  VectorXd ap = a;
  VectorXd bp = b;
  for (int i = 0; i < n; ++i) ap[i] += pert * (i + 1);
  bp[m - 1] += pert * static_cast<double>(n) * (n + 1) / 2.0;
  bp[m - 1] += a.sum() - b.sum();  // absorb the balance residue

  // northwest-corner start
  std::vector<BasisArc> basis;
  basis.reserve(static_cast<std::size_t>(n + m - 1));
  {
    int i = 0, j = 0;
    double ra = ap[0], rb = bp[0];
    while (true) {
      double q = std::min(ra, rb);
      basis.push_back({i, j, q});
      ra -= q;
      rb -= q;
      if (i == n - 1 && j == m - 1) break;
      if (ra <= rb && i < n - 1) {
        ++i;
        ra = ap[i];
      } else if (j < m - 1) {
        ++j;
        rb = bp[j];
      } else {
        ++i;
        ra = ap[i];
      }
    }
  }
  check(basis.size() == static_cast<std::size_t>(n + m - 1),
        "exact_ot: malformed starting basis");

  const double cmax = std::max(1.0, cost.cwiseAbs().maxCoeff());
  const double opt_tol = 1e-12 * cmax;
  std::vector<std::vector<int>> adj(static_cast<std::size_t>(n + m));
  auto rebuild_adj = [&] {
    for (auto& lst : adj) lst.clear();
    for (std::size_t e = 0; e < basis.size(); ++e) {
      adj[static_cast<std::size_t>(basis[e].i)].push_back(static_cast<int>(e));
      adj[static_cast<std::size_t>(n + basis[e].j)].push_back(
          static_cast<int>(e));
    }
  };
  std::vector<double> u(static_cast<std::size_t>(n)),
      v(static_cast<std::size_t>(m));
  std::vector<char> seen(static_cast<std::size_t>(n + m));
  auto compute_potentials = [&] {
    std::fill(seen.begin(), seen.end(), 0);
    std::deque<int> queue;
    u[0] = 0.0;
    seen[0] = 1;
    queue.push_back(0);
    while (!queue.empty()) {
      int node = queue.front();
      queue.pop_front();
      for (int e : adj[static_cast<std::size_t>(node)]) {
        const BasisArc& arc = basis[static_cast<std::size_t>(e)];
        int other = (node == arc.i) ? n + arc.j : arc.i;
        if (seen[static_cast<std::size_t>(other)]) continue;
        seen[static_cast<std::size_t>(other)] = 1;
        if (other >= n)
          v[static_cast<std::size_t>(other - n)] =
              cost(arc.i, arc.j) - u[static_cast<std::size_t>(arc.i)];
        else
          u[static_cast<std::size_t>(other)] =
              cost(arc.i, arc.j) - v[static_cast<std::size_t>(arc.j)];
        queue.push_back(other);
      }
    }
    for (char s : seen) check(s, "exact_ot: basis is not a spanning tree");
  };

  const long max_pivots = 2000 + 50L * n * m;
  long pivots = 0;
  std::vector<int> parent_arc(static_cast<std::size_t>(n + m));
  while (true) {
    rebuild_adj();
    compute_potentials();
    int best_i = -1, best_j = -1;
    double best_r = -opt_tol;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) {
        double r = cost(i, j) - u[static_cast<std::size_t>(i)] -
                   v[static_cast<std::size_t>(j)];
        if (r < best_r) {
          best_r = r;
          best_i = i;
          best_j = j;
        }
      }
    if (best_i < 0) break;  // optimal
    check(++pivots <= max_pivots, "exact_ot: pivot limit hit (cycling?)");

    // tree path from row best_i to column best_j
    std::fill(seen.begin(), seen.end(), 0);
    std::fill(parent_arc.begin(), parent_arc.end(), -1);
    std::deque<int> queue;
    seen[static_cast<std::size_t>(best_i)] = 1;
    queue.push_back(best_i);
    while (!queue.empty()) {
      int node = queue.front();
      queue.pop_front();
      if (node == n + best_j) break;
      for (int e : adj[static_cast<std::size_t>(node)]) {
        const BasisArc& arc = basis[static_cast<std::size_t>(e)];
        int other = (node == arc.i) ? n + arc.j : arc.i;
        if (seen[static_cast<std::size_t>(other)]) continue;
        seen[static_cast<std::size_t>(other)] = 1;
        parent_arc[static_cast<std::size_t>(other)] = e;
        queue.push_back(other);
      }
    }
    check(seen[static_cast<std::size_t>(n + best_j)],
          "exact_ot: entering arc closes no cycle");

    // walk back collecting the alternating cycle; arcs at odd positions
    // (1st, 3rd, ...) counted from the entering arc lose flow
    std::vector<int> path;
    int node = n + best_j;
    while (node != best_i) {
      int e = parent_arc[static_cast<std::size_t>(node)];
      path.push_back(e);
      const BasisArc& arc = basis[static_cast<std::size_t>(e)];
      node = (node == arc.i) ? n + arc.j : arc.i;
    }
    double theta = std::numeric_limits<double>::infinity();
    int leaving = -1;
    for (std::size_t k = 0; k < path.size(); ++k) {
      if (k % 2 == 0) {  // minus arc
        double fl = basis[static_cast<std::size_t>(path[k])].flow;
        if (fl < theta) {
          theta = fl;
          leaving = path[k];
        }
      }
    }
    check(leaving >= 0, "exact_ot: no leaving arc");
    for (std::size_t k = 0; k < path.size(); ++k) {
      if (k % 2 == 0)
        basis[static_cast<std::size_t>(path[k])].flow -= theta;
      else
        basis[static_cast<std::size_t>(path[k])].flow += theta;
    }
    basis[static_cast<std::size_t>(leaving)] = {best_i, best_j, theta};
  }

  // re-solve flows on the optimal basis with the original marginals by
  // peeling leaves of the basis tree
  {
    std::vector<double> remaining(static_cast<std::size_t>(n + m));
    for (int i = 0; i < n; ++i) remaining[static_cast<std::size_t>(i)] = a[i];
    for (int j = 0; j < m; ++j)
      remaining[static_cast<std::size_t>(n + j)] = b[j];
    std::vector<int> degree(static_cast<std::size_t>(n + m), 0);
    std::vector<char> removed(basis.size(), 0);
    rebuild_adj();
    for (std::size_t node = 0; node < adj.size(); ++node)
      degree[node] = static_cast<int>(adj[node].size());
    std::deque<int> leaves;
    for (int node = 0; node < n + m; ++node)
      if (degree[static_cast<std::size_t>(node)] == 1) leaves.push_back(node);
    std::size_t processed = 0;
    while (!leaves.empty()) {
      int node = leaves.front();
      leaves.pop_front();
      int arc_id = -1;
      for (int e : adj[static_cast<std::size_t>(node)])
        if (!removed[static_cast<std::size_t>(e)]) arc_id = e;
      if (arc_id < 0) continue;  // last node of the tree
      BasisArc& arc = basis[static_cast<std::size_t>(arc_id)];
      arc.flow = remaining[static_cast<std::size_t>(node)];
      removed[static_cast<std::size_t>(arc_id)] = 1;
      ++processed;
      int other = (node == arc.i) ? n + arc.j : arc.i;
      remaining[static_cast<std::size_t>(other)] -= arc.flow;
      if (--degree[static_cast<std::size_t>(other)] == 1)
        leaves.push_back(other);
    }
    check(processed == basis.size(), "exact_ot: leaf peeling incomplete");
  }

  TransportPlan plan;
  plan.a = a;
  plan.b = b;
  plan.epsilon = 0.0;
  plan.iterations = static_cast<int>(pivots);
  plan.pi = MatrixXd::Zero(n, m);
  double value = 0.0;
  for (const BasisArc& arc : basis) {
    double fl = arc.flow;
    check(fl >= -1e-8 * scale_a, "exact_ot: negative basic flow ", fl);
    fl = std::max(0.0, fl);
    plan.pi(arc.i, arc.j) += fl;
    value += fl * cost(arc.i, arc.j);
  }
  plan.cost = value;
  plan.cost_regularized = value;
  VectorXd row = plan.pi.rowwise().sum();
  VectorXd col = plan.pi.colwise().sum();
  plan.residual =
      (row - a).cwiseAbs().sum() + (col - b).cwiseAbs().sum();
  plan.converged = true;
  return plan;
}

// ---- dataset distance --------------------------------------------------------

namespace {

// Stratified deterministic subsample; the same derived key on both sides
// keeps otdd(A, A) exactly zero and otdd symmetric under argument swap.
std::vector<int> subsample_indices(const LabeledDataset& ds, int max_points,
                                   std::uint64_t seed) {
  const int total = static_cast<int>(ds.labels.size());
  std::vector<int> out;
  if (total <= max_points) {
    out.resize(static_cast<std::size_t>(total));
    for (int i = 0; i < total; ++i) out[static_cast<std::size_t>(i)] = i;
    return out;
  }
  auto per_class = ds.per_class_indices();
  std::vector<int> classes = ds.present_classes();
  std::vector<int> alloc(static_cast<std::size_t>(kNumClasses), 0);
  std::vector<std::pair<double, int>> frac;
  int assigned = 0;
  for (int c : classes) {
    double share = static_cast<double>(max_points) *
                   static_cast<double>(per_class[static_cast<std::size_t>(c)]
                                           .size()) /
                   static_cast<double>(total);
    alloc[static_cast<std::size_t>(c)] = static_cast<int>(share);
    assigned += alloc[static_cast<std::size_t>(c)];
    frac.push_back({share - std::floor(share), c});
  }
  std::sort(frac.begin(), frac.end(), [](const auto& x, const auto& y) {
    if (x.first != y.first) return x.first > y.first;
    return x.second < y.second;
  });
  int left = max_points - assigned;
  std::size_t k = 0;
  while (left > 0 && !frac.empty()) {
    int c = frac[k % frac.size()].second;
    if (alloc[static_cast<std::size_t>(c)] <
        static_cast<int>(per_class[static_cast<std::size_t>(c)].size())) {
      ++alloc[static_cast<std::size_t>(c)];
      --left;
    }
    ++k;
    check(k < frac.size() * static_cast<std::size_t>(max_points + 1),
          "otdd: subsample allocation failed");
  }
  Rng rng(derive_seed(seed, "otdd/subsample"));
  for (int c : classes) {
    const auto& members = per_class[static_cast<std::size_t>(c)];
    int want = alloc[static_cast<std::size_t>(c)];
    auto pick = rng.sample_without_replacement(
        static_cast<int>(members.size()), want);
    for (int p : pick) out.push_back(members[static_cast<std::size_t>(p)]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

MatrixXd features_of(const LabeledDataset& ds, const std::vector<int>& idx) {
  MatrixXd x(static_cast<long>(idx.size()), kDim);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const float* img = ds.images.item(idx[r]);
    for (int k = 0; k < kDim; ++k)
      x(static_cast<long>(r), k) = static_cast<double>(img[k]);
  }
  return x;
}

// Class moment table for one side. Missing classes stay default-initialized
// and are never referenced because labels only take present values.
std::vector<ClassMoments> side_moments(const MatrixXd& x,
                                       const std::vector<int>& labels,
                                       double delta,
                                       const std::string& side_name,
                                       std::vector<std::string>& warnings) {
  std::vector<ClassMoments> mm(static_cast<std::size_t>(kNumClasses));
  for (int c = 0; c < kNumClasses; ++c) {
    std::vector<int> rows;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) rows.push_back(static_cast<int>(i));
    if (rows.empty()) continue;
    MatrixXd xc(static_cast<long>(rows.size()), x.cols());
    for (std::size_t r = 0; r < rows.size(); ++r)
      xc.row(static_cast<long>(r)) = x.row(rows[r]);
    mm[static_cast<std::size_t>(c)] = compute_moments(xc, delta);
    if (rows.size() < 2) {
      std::ostringstream os;
      os << side_name << ": class " << c
         << " has one sample, mean-only fallback";
      warnings.push_back(os.str());
    }
  }
  return mm;
}

// |x - y|^2 via an explicit difference loop: squaring makes the result
// invariant under operand swap, so cross matrices are exactly
// transpose-symmetric.
MatrixXd cost_matrix(const MatrixXd& xa, const std::vector<int>& ya,
                     const MatrixXd& xb, const std::vector<int>& yb,
                     const Eigen::Matrix<double, 7, 7>& w2) {
  const long na = xa.rows(), nb = xb.rows();
  MatrixXd c(na, nb);
  for (long i = 0; i < na; ++i)
    for (long j = 0; j < nb; ++j) {
      double s = 0.0;
      for (int k = 0; k < kDim; ++k) {
        double dk = xa(i, k) - xb(j, k);
        s += dk * dk;
      }
      c(i, j) =
          s + w2(ya[static_cast<std::size_t>(i)], yb[static_cast<std::size_t>(j)]);
    }
  return c;
}

Eigen::Matrix<double, 7, 7> w2_table(const std::vector<ClassMoments>& ma,
                                     const std::vector<ClassMoments>& mb) {
  Eigen::Matrix<double, 7, 7> t = Eigen::Matrix<double, 7, 7>::Zero();
  for (int ca = 0; ca < kNumClasses; ++ca) {
    if (ma[static_cast<std::size_t>(ca)].count == 0) continue;
    for (int cb = 0; cb < kNumClasses; ++cb) {
      if (mb[static_cast<std::size_t>(cb)].count == 0) continue;
      t(ca, cb) = gaussian_w2_sq(ma[static_cast<std::size_t>(ca)],
                                 mb[static_cast<std::size_t>(cb)]);
    }
  }
  return t;
}

void append_ledger(const std::string& path, const std::string& a,
                   const std::string& b, double distance, double eps,
                   int points, std::uint64_t seed, bool converged) {
  bool fresh = !std::filesystem::exists(path);
  std::ofstream os(path, std::ios::app);
  check(os.good(), "otdd: cannot open ledger ", path);
  if (fresh) os << "dataset_a,dataset_b,distance,epsilon,points,seed,converged\n";
  os << a << "," << b << "," << distance << "," << eps << "," << points << ","
     << seed << "," << (converged ? 1 : 0) << "\n";
}

}  // namespace

double otdd(const LabeledDataset& a_in, const LabeledDataset& b_in,
            const OtddConfig& cfg, OtddDiagnostics* diag) {
  a_in.validate();
  b_in.validate();
  check(!a_in.labels.empty() && !b_in.labels.empty(), "otdd: empty dataset");
  check(cfg.epsilon > 0.0 && cfg.max_points >= 1 && cfg.delta >= 0.0,
        "otdd: bad config");

  // Canonical operand order. The solver is swap-symmetric, but the final
  // cost accumulation and the debias chain re-associate float sums under a
  // swap, so the two directions could differ in the last bits without this.
  const bool swapped = b_in.digest() < a_in.digest();
  const LabeledDataset& a = swapped ? b_in : a_in;
  const LabeledDataset& b = swapped ? a_in : b_in;

  OtddDiagnostics local;
  std::vector<int> ia = subsample_indices(a, cfg.max_points, cfg.seed);
  std::vector<int> ib = subsample_indices(b, cfg.max_points, cfg.seed);
  local.points_a = static_cast<int>(ia.size());
  local.points_b = static_cast<int>(ib.size());
  MatrixXd xa = features_of(a, ia);
  MatrixXd xb = features_of(b, ib);
  std::vector<int> ya, yb;
  ya.reserve(ia.size());
  yb.reserve(ib.size());
  for (int i : ia) ya.push_back(a.labels[static_cast<std::size_t>(i)]);
  for (int i : ib) yb.push_back(b.labels[static_cast<std::size_t>(i)]);

  auto ma = side_moments(xa, ya, cfg.delta, a.source_id, local.warnings);
  auto mb = side_moments(xb, yb, cfg.delta, b.source_id, local.warnings);

  auto w2ab = w2_table(ma, mb);
  MatrixXd cab = cost_matrix(xa, ya, xb, yb, w2ab);
  const double scale = cab.maxCoeff();
  VectorXd ua = VectorXd::Constant(xa.rows(), 1.0 / double(xa.rows()));
  VectorXd ub = VectorXd::Constant(xb.rows(), 1.0 / double(xb.rows()));

  double dist_sq = 0.0;
  if (scale <= 0.0) {
    dist_sq = 0.0;  // every cross cost is zero: identical point masses
  } else if (cfg.use_exact) {
    TransportPlan plan = exact_ot(cab, ua, ub);
    local.iterations = plan.iterations;
    dist_sq = plan.cost;
  } else {
    auto solve = [&](const MatrixXd& c, const VectorXd& u,
                     const VectorXd& v) {
      MatrixXd cs = c / scale;
      VectorXd f, g;
      TransportPlan plan;
      double eps = 1.0;
      while (eps > cfg.epsilon * 1.0000001) {
        plan = sinkhorn_core(cs, u, v, eps, 300,
                             std::max(cfg.tol, 1e-4), f, g);
        local.iterations += plan.iterations;
        eps *= 0.5;
      }
      plan = sinkhorn_core(cs, u, v, cfg.epsilon, cfg.max_iter, cfg.tol, f, g);
      local.iterations += plan.iterations;
      local.converged = local.converged && plan.converged;
      return plan.cost * scale;
    };
    double v_ab = solve(cab, ua, ub);
    auto w2aa = w2_table(ma, ma);
    auto w2bb = w2_table(mb, mb);
    MatrixXd caa = cost_matrix(xa, ya, xa, ya, w2aa);
    MatrixXd cbb = cost_matrix(xb, yb, xb, yb, w2bb);
    double v_aa = solve(caa, ua, ua);
    double v_bb = solve(cbb, ub, ub);
    // debiased sharp cost: the self terms cancel the entropic blur and make
    // the distance vanish exactly on identical inputs
    dist_sq = std::max(0.0, v_ab - 0.5 * v_aa - 0.5 * v_bb);
  }
  double distance = std::sqrt(dist_sq);
  if (swapped) std::swap(local.points_a, local.points_b);
  if (!cfg.ledger_csv.empty())
    append_ledger(cfg.ledger_csv, a_in.source_id, b_in.source_id, distance,
                  cfg.epsilon, std::max(local.points_a, local.points_b),
                  cfg.seed, local.converged);
  if (diag) *diag = local;
  return distance;
}

}  // namespace mdi
