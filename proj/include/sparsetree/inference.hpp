#pragma once

// The three regularized inference regimes over dependency trees:
//
//   marginal   exp(f)/Z over every tree (enumeration scale only),
//   MAP        the single best tree (delegated to map_oracle),
//   SparseMAP  max_q  q.f - 1/2 ||M q||^2  over the simplex, solved with an
//              active-set method whose only combinatorial primitive is a MAP
//              call on residual arc scores.
//
// Also here: a projected-gradient QP oracle over an explicit tree list, used
// to cross-check the active-set solver, and temperature scaling.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "sparsetree/errors.hpp"
#include "sparsetree/linalg.hpp"
#include "sparsetree/map_oracle.hpp"
#include "sparsetree/structures.hpp"

namespace sparsetree {

struct SolverConfig {
  int max_iterations = 100;
  double kkt_tol = 1e-9;
  double ridge = 1e-10;    // added to the Gram diagonal
  double drop_tol = 1e-12; // support probabilities below this are pruned

  void validate() const {
    if (max_iterations <= 0 || kkt_tol <= 0 || ridge <= 0 || drop_tol <= 0)
      throw InputError("SolverConfig: all fields must be positive");
  }
};

// Sparse distribution over trees plus the solver by-products needed for the
// backward pass: inverse regularized Gram Z and the simplex dual tau.
struct SparsePosterior {
  int n = 0;
  std::vector<DepTree> support;
  Vec q;          // probability per support tree; q >= 0, sums to 1
  Vec u;          // arc marginals, ArcScores slot layout
  Mat Z;          // (M_S^T M_S + ridge I)^{-1} over the final support
  double tau = 0; // simplex dual at the solution
  int iterations = 0;
  bool converged = true;

  int support_size() const { return static_cast<int>(support.size()); }
};

// Dense distribution over an explicit tree list (enumeration-scale results).
struct DensePosterior {
  std::vector<DepTree> trees;
  Vec p;
  bool converged = true;
  int iterations = 0;
};

// Entropy-regularized posterior: p(h) proportional to exp(f(h)), computed
// over the full enumeration with log-sum-exp stabilization.
inline DensePosterior marginal_posterior(const ArcScores& scores) {
  if (scores.n > kMaxEnumerableTokens)
    throw SizeLimitError("marginal_posterior: n must be <= " +
                         std::to_string(kMaxEnumerableTokens));
  DensePosterior post;
  post.trees = enumerate_trees(scores.n);
  Vec f(post.trees.size());
  for (size_t i = 0; i < post.trees.size(); ++i) f[i] = tree_score(post.trees[i], scores);
  const double log_z = log_sum_exp(f);
  post.p.resize(f.size());
  for (size_t i = 0; i < f.size(); ++i) post.p[i] = std::exp(f[i] - log_z);
  return post;
}

// Divides every arc score by t; t -> 0 sharpens the posterior toward MAP.
inline ArcScores scale_temperature(const ArcScores& scores, double t) {
  if (!(t > 0.0) || !std::isfinite(t))
    throw InputError("scale_temperature: temperature must be positive");
  ArcScores out = scores;
  for (double& v : out.s) v /= t;
  return out;
}

namespace detail {

// Cholesky factor of the ridge-regularized Gram over the active support,
// grown one structure at a time and shrunk on drops. Appending is a true
// rank-one extension; removal refactors from the deleted index onward.
// A full refactorization is attempted whenever an update pivot degenerates.
class GramChol {
 public:
  explicit GramChol(double ridge) : ridge_(ridge) {}

  int size() const { return static_cast<int>(gram_.size()); }

  // overlaps[i] = m_new . m_i for existing columns, diag = m_new . m_new.
  void append(const Vec& overlaps, double diag) {
    const int k = size();
    for (int i = 0; i < k; ++i) gram_[i].push_back(overlaps[i]);
    Vec row = overlaps;
    row.push_back(diag);
    gram_.push_back(row);
    if (!extend_factor()) {
      if (!refactor()) throw NumericalError("sparsemap: singular Gram after ridge");
    }
  }

  void remove(int idx) {
    gram_.erase(gram_.begin() + idx);
    for (auto& row : gram_) row.erase(row.begin() + idx);
    fact_.resize(idx);
    for (int r = idx; r < size(); ++r) {
      if (!push_factor_row(r)) {
        if (!refactor()) throw NumericalError("sparsemap: singular Gram after ridge");
        return;
      }
    }
  }

  // Solves (G + ridge I) x = b.
  Vec solve(const Vec& b) const {
    const int k = size();
    Vec x(b);
    for (int i = 0; i < k; ++i) {
      double s = x[i];
      for (int j = 0; j < i; ++j) s -= fact_[i][j] * x[j];
      x[i] = s / fact_[i][i];
    }
    for (int i = k - 1; i >= 0; --i) {
      double s = x[i];
      for (int j = i + 1; j < k; ++j) s -= fact_[j][i] * x[j];
      x[i] = s / fact_[i][i];
    }
    return x;
  }

  Mat inverse() const {
    const int k = size();
    Mat z(k, k);
    Vec e(k, 0.0);
    for (int c = 0; c < k; ++c) {
      e[c] = 1.0;
      Vec col = solve(e);
      e[c] = 0.0;
      for (int r = 0; r < k; ++r) z(r, c) = col[r];
    }
    // Symmetrize against round-off.
    for (int r = 0; r < k; ++r)
      for (int c = r + 1; c < k; ++c) {
        const double v = 0.5 * (z(r, c) + z(c, r));
        z(r, c) = z(c, r) = v;
      }
    return z;
  }

 private:
  static constexpr double kPivotMin = 1e-8;

  bool push_factor_row(int r) {
    Vec row(r + 1, 0.0);
    for (int j = 0; j < r; ++j) {
      double s = gram_[r][j];
      for (int t = 0; t < j; ++t) s -= row[t] * fact_[j][t];
      row[j] = s / fact_[j][j];
    }
    double pivot_sq = gram_[r][r] + ridge_;
    for (int j = 0; j < r; ++j) pivot_sq -= row[j] * row[j];
    if (pivot_sq < kPivotMin * kPivotMin) return false;
    row[r] = std::sqrt(pivot_sq);
    fact_.push_back(std::move(row));
    return true;
  }

  bool extend_factor() { return push_factor_row(size() - 1); }

  bool refactor() {
    fact_.clear();
    for (int r = 0; r < size(); ++r) {
      Vec row(r + 1, 0.0);
      for (int j = 0; j < r; ++j) {
        double s = gram_[r][j];
        for (int t = 0; t < j; ++t) s -= row[t] * fact_[j][t];
        row[j] = s / fact_[j][j];
      }
      double pivot_sq = gram_[r][r] + ridge_;
      for (int j = 0; j < r; ++j) pivot_sq -= row[j] * row[j];
      if (pivot_sq <= 0.0) return false;
      row[r] = std::sqrt(pivot_sq);
      fact_.push_back(std::move(row));
    }
    return true;
  }

  double ridge_;
  std::vector<Vec> gram_;   // symmetric, stored square
  std::vector<Vec> fact_;   // lower-triangular rows
};

inline std::vector<int> tree_slots(const DepTree& tree, int n) {
  std::vector<int> slots(n);
  for (int t = 1; t <= n; ++t) slots[t - 1] = arc_slot(tree.head_of(t), t, n);
  return slots;
}

inline int slot_overlap(const std::vector<int>& a, const std::vector<int>& b) {
  int count = 0;
  for (int x : a)
    for (int y : b)
      if (x == y) ++count;
  return count;
}

struct KktSolution {
  Vec q_hat;
  double tau = 0.0;
};

// Restricted stationarity on the active support:
//   q = Z (f - tau 1),  tau = (sigma.f - 1) / zeta
// with sigma the column sums of Z and zeta their total.
inline KktSolution solve_restricted_kkt(const GramChol& chol, const Vec& f) {
  KktSolution sol;
  const Vec ones(f.size(), 1.0);
  const Vec y = chol.solve(ones);  // Z 1 = column sums of Z
  const Vec x = chol.solve(f);     // Z f
  double zeta = 0.0;
  for (double v : y) zeta += v;
  if (!(zeta > 0.0)) throw NumericalError("sparsemap: nonpositive zeta in KKT solve");
  sol.tau = (dot(y, f) - 1.0) / zeta;
  sol.q_hat = x;
  axpy(-sol.tau, y, sol.q_hat);
  return sol;
}

}  // namespace detail

// Arc marginals u = sum_h p(h) m_h for a dense posterior.
inline Vec arc_marginals(const std::vector<DepTree>& trees, const Vec& p, int n) {
  Vec u(arc_slot_count(n), 0.0);
  for (size_t i = 0; i < trees.size(); ++i)
    for (int t = 1; t <= n; ++t) u[arc_slot(trees[i].head_of(t), t, n)] += p[i];
  return u;
}

// Objective q.f - 1/2 ||M q||^2 for a distribution over an explicit tree list.
inline double qp_objective(const std::vector<DepTree>& trees, const Vec& p, const Vec& f,
                           int n) {
  const Vec u = arc_marginals(trees, p, n);
  return dot(p, f) - 0.5 * dot(u, u);
}

// SparseMAP posterior by the active-set method. Each iteration calls the MAP
// oracle on residual scores s - u; the returned certificate bound is
//   max_h f(h) - m_h.u  <=  tau + kkt_tol.
inline SparsePosterior sparsemap(const ArcScores& scores, const SolverConfig& config = {}) {
  config.validate();
  const int n = scores.n;
  if (n < 1) throw InputError("sparsemap: need n >= 1");
  if (!scores.all_finite()) throw InputError("sparsemap: scores must be finite");

  struct Active {
    DepTree tree;
    std::vector<int> slots;
    double f = 0.0;
  };
  std::vector<Active> support;
  detail::GramChol chol(config.ridge);
  Vec q;

  auto contains = [&](const DepTree& t) {
    for (const auto& a : support)
      if (a.tree == t) return true;
    return false;
  };
  auto push_structure = [&](const DepTree& t) {
    Active a;
    a.tree = t;
    a.slots = detail::tree_slots(t, n);
    a.f = tree_score(t, scores);
    Vec overlaps(support.size());
    for (size_t i = 0; i < support.size(); ++i)
      overlaps[i] = detail::slot_overlap(support[i].slots, a.slots);
    chol.append(overlaps, static_cast<double>(n));
    support.push_back(std::move(a));
  };
  auto drop_structure = [&](int idx) {
    support.erase(support.begin() + idx);
    q.erase(q.begin() + idx);
    chol.remove(idx);
  };
  auto current_marginals = [&]() {
    Vec u(arc_slot_count(n), 0.0);
    for (size_t i = 0; i < support.size(); ++i)
      for (int slot : support[i].slots) u[slot] += q[i];
    return u;
  };
  auto support_scores = [&]() {
    Vec f(support.size());
    for (size_t i = 0; i < support.size(); ++i) f[i] = support[i].f;
    return f;
  };

  push_structure(map_tree(scores));
  q = {1.0};
  double tau = detail::solve_restricted_kkt(chol, support_scores()).tau;

  bool converged = false;
  int iterations = 0;
  for (int iter = 1; iter <= config.max_iterations; ++iter) {
    iterations = iter;
    const Vec u = current_marginals();

    ArcScores residual = scores;
    for (size_t slot = 0; slot < residual.s.size(); ++slot) residual.s[slot] -= u[slot];
    const DepTree candidate = map_tree(residual);
    const double gain = tree_score(candidate, residual);  // f(h*) - m_h*.u

    if (gain <= tau + config.kkt_tol || contains(candidate)) {
      converged = true;
      break;
    }

    push_structure(candidate);
    q.push_back(0.0);

    // Restricted KKT solve with drops until the minimizer is feasible.
    while (true) {
      const auto sol = detail::solve_restricted_kkt(chol, support_scores());
      double min_q = sol.q_hat.empty() ? 0.0 : *std::min_element(sol.q_hat.begin(), sol.q_hat.end());

      if (min_q >= -config.drop_tol) {
        q = sol.q_hat;
        tau = sol.tau;
        bool dropped = false;
        for (int i = static_cast<int>(q.size()) - 1; i >= 0; --i) {
          if (q[i] < 0.0) {
            drop_structure(i);
            dropped = true;
          }
        }
        if (!dropped) break;
        if (support.size() == 1) {
          q = {1.0};
          tau = detail::solve_restricted_kkt(chol, support_scores()).tau;
          break;
        }
        continue;  // exact re-solve on the surviving support
      }

      // Longest feasible step from the current q toward q_hat.
      double gamma = 1.0;
      for (size_t i = 0; i < q.size(); ++i) {
        const double dir = sol.q_hat[i] - q[i];
        if (dir < 0.0) gamma = std::min(gamma, q[i] / (q[i] - sol.q_hat[i]));
      }
      for (size_t i = 0; i < q.size(); ++i) {
        q[i] += gamma * (sol.q_hat[i] - q[i]);
        if (q[i] < config.drop_tol) q[i] = 0.0;
      }
      for (int i = static_cast<int>(q.size()) - 1; i >= 0; --i)
        if (q[i] == 0.0) drop_structure(i);
      if (support.empty()) throw NumericalError("sparsemap: active set emptied");
    }
  }

  // Final truncation: clip vanishing probabilities, prune, renormalize.
  bool pruned = false;
  for (int i = static_cast<int>(q.size()) - 1; i >= 0; --i) {
    if (q[i] < config.drop_tol) {
      drop_structure(i);
      pruned = true;
    }
  }
  double total = 0.0;
  for (double v : q) total += v;
  for (double& v : q) v /= total;
  if (pruned) tau = detail::solve_restricted_kkt(chol, support_scores()).tau;

  SparsePosterior post;
  post.n = n;
  for (const auto& a : support) post.support.push_back(a.tree);
  post.q = q;
  post.u = arc_marginals(post.support, post.q, n);
  post.Z = chol.inverse();
  post.tau = tau;
  post.iterations = iterations;
  post.converged = converged;
  if (post.support_size() > legal_arc_count(n))
    throw NumericalError("sparsemap: support exceeded the arc-count bound");
  return post;
}

// Posterior for the same QP restricted to an explicit tree list, by projected
// gradient with the sort-based simplex projection. Oracle-grade: slow, simple,
// and independent of the active-set path. `f` holds one score per tree.
inline DensePosterior qp_posterior_over_trees(const std::vector<DepTree>& trees, const Vec& f,
                                              int n, double grad_tol = 1e-10,
                                              int max_iterations = 100000) {
  if (trees.empty() || trees.size() != f.size())
    throw InputError("qp_posterior_over_trees: trees and scores must align");

  const size_t count = trees.size();
  std::vector<std::vector<int>> slots(count);
  for (size_t i = 0; i < count; ++i) slots[i] = detail::tree_slots(trees[i], n);

  // Safe step size from a Gershgorin bound on the arc co-occurrence matrix.
  const int a_slots = arc_slot_count(n);
  Mat cooc(a_slots, a_slots);
  for (size_t i = 0; i < count; ++i)
    for (int x : slots[i])
      for (int y : slots[i]) cooc(x, y) += 1.0;
  double lip = 0.0;
  for (int r = 0; r < a_slots; ++r) {
    double row = 0.0;
    for (int c = 0; c < a_slots; ++c) row += std::abs(cooc(r, c));
    lip = std::max(lip, row);
  }
  const double step = 1.0 / std::max(lip, 1.0);

  DensePosterior post;
  post.trees = trees;
  post.p.assign(count, 1.0 / static_cast<double>(count));
  post.converged = false;

  Vec u(a_slots, 0.0), grad(count, 0.0), next(count, 0.0);
  for (int it = 1; it <= max_iterations; ++it) {
    post.iterations = it;
    std::fill(u.begin(), u.end(), 0.0);
    for (size_t i = 0; i < count; ++i)
      for (int slot : slots[i]) u[slot] += post.p[i];
    for (size_t i = 0; i < count; ++i) {
      double mu = 0.0;
      for (int slot : slots[i]) mu += u[slot];
      grad[i] = mu - f[i];  // gradient of 1/2||Mq||^2 - f.q
    }
    for (size_t i = 0; i < count; ++i) next[i] = post.p[i] - step * grad[i];
    next = project_to_simplex(next);
    double moved_sq = 0.0;
    for (size_t i = 0; i < count; ++i) {
      const double d = next[i] - post.p[i];
      moved_sq += d * d;
    }
    post.p = next;
    if (std::sqrt(moved_sq) / step <= grad_tol) {
      post.converged = true;
      break;
    }
  }
  return post;
}

// Brute-force SparseMAP over the full enumeration (n <= 4). Near-zero entries
// are truncated and the rest renormalized so sparsity is literal.
inline DensePosterior sparsemap_brute(const ArcScores& scores) {
  if (scores.n > 4) throw SizeLimitError("sparsemap_brute: n must be <= 4");
  const std::vector<DepTree> trees = enumerate_trees(scores.n);
  Vec f(trees.size());
  for (size_t i = 0; i < trees.size(); ++i) f[i] = tree_score(trees[i], scores);
  DensePosterior post = qp_posterior_over_trees(trees, f, scores.n);
  double total = 0.0;
  for (double& v : post.p) {
    if (v < 1e-9) v = 0.0;
    total += v;
  }
  for (double& v : post.p) v /= total;
  return post;
}

}  // namespace sparsetree
