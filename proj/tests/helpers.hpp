#pragma once

// Shared fixtures for the test suites.

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "sparsetree/inference.hpp"
#include "sparsetree/rng.hpp"
#include "sparsetree/structures.hpp"

namespace sparsetree::testing {

inline ArcScores random_scores(int n, Rng& rng, double lo = -2.0, double hi = 2.0) {
  ArcScores s = ArcScores::zeros(n);
  for (int mod = 1; mod <= n; ++mod)
    for (int head = 0; head <= n; ++head)
      if (head != mod) s.at(head, mod) = rng.uniform(lo, hi);
  return s;
}

// Gap between the best and second-best distinct tree scores.
inline double map_gap(const ArcScores& s) {
  double best = -1e300, second = -1e300;
  for (const auto& t : enumerate_trees(s.n)) {
    const double f = tree_score(t, s);
    if (f > best) {
      second = best;
      best = f;
    } else if (f > second && f < best) {
      second = f;
    }
  }
  return best - second;
}

// The optimal q of the SparseMAP QP is unique iff the indicator columns of
// the tight set, extended with the normalization row, have full column rank.
// Arc-factored scores make rank-deficient tight sets (head-choice
// "rectangles") a recurring event, in which case only u and the objective
// are identified, not q.
inline bool unique_optimal_q(const std::vector<DepTree>& trees, const Vec& f, const Vec& u,
                             double tau, int n, double tight_tol = 1e-6) {
  std::vector<size_t> tight;
  for (size_t i = 0; i < trees.size(); ++i) {
    double slack = f[i];
    for (int t = 1; t <= n; ++t) slack -= u[arc_slot(trees[i].head_of(t), t, n)];
    if (slack >= tau - tight_tol) tight.push_back(i);
  }
  const int rows = arc_slot_count(n) + 1;
  const int cols = static_cast<int>(tight.size());
  std::vector<std::vector<double>> m(rows, std::vector<double>(cols, 0.0));
  for (int c = 0; c < cols; ++c) {
    for (int t = 1; t <= n; ++t)
      m[arc_slot(trees[tight[c]].head_of(t), t, n)][c] = 1.0;
    m[rows - 1][c] = 1.0;
  }
  // Column rank by Gaussian elimination.
  int rank = 0;
  for (int c = 0; c < cols; ++c) {
    int pivot = -1;
    double best = 1e-9;
    for (int r = rank; r < rows; ++r)
      if (std::abs(m[r][c]) > best) {
        best = std::abs(m[r][c]);
        pivot = r;
      }
    if (pivot < 0) return false;  // dependent column: q not identified
    std::swap(m[rank], m[pivot]);
    for (int r = 0; r < rows; ++r) {
      if (r == rank || m[r][c] == 0.0) continue;
      const double factor = m[r][c] / m[rank][c];
      for (int cc = c; cc < cols; ++cc) m[r][cc] -= factor * m[rank][cc];
    }
    ++rank;
  }
  return true;
}

inline std::set<std::vector<int>> dense_support(const DensePosterior& post,
                                                double tol = 1e-9) {
  std::set<std::vector<int>> keys;
  for (size_t i = 0; i < post.p.size(); ++i)
    if (post.p[i] > tol) keys.insert(post.trees[i].heads);
  return keys;
}

inline std::set<std::vector<int>> sparse_support(const SparsePosterior& post) {
  std::set<std::vector<int>> keys;
  for (const auto& t : post.support) keys.insert(t.heads);
  return keys;
}

inline bool relative_close(double a, double b, double rel, double floor) {
  return std::abs(a - b) <= rel * std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace sparsetree::testing
