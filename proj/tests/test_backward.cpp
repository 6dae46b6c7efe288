#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "helpers.hpp"
#include "sparsetree/backward.hpp"
#include "sparsetree/inference.hpp"
#include "sparsetree/rng.hpp"

using namespace sparsetree;
using namespace sparsetree::testing;

namespace {

// Instance with at least two support trees (so D is nontrivial) whose
// optimal q is identified (degenerate faces have no pointwise Jacobian).
SparsePosterior spread_instance(int n, Rng& rng, ArcScores& scores_out) {
  const auto trees = enumerate_trees(n);
  for (int attempt = 0; attempt < 500; ++attempt) {
    ArcScores s = random_scores(n, rng);
    SparsePosterior post = sparsemap(s);
    if (!post.converged || post.support_size() < 2) continue;
    Vec f(trees.size());
    for (size_t i = 0; i < trees.size(); ++i) f[i] = tree_score(trees[i], s);
    if (!unique_optimal_q(trees, f, post.u, post.tau, n)) continue;
    scores_out = s;
    return post;
  }
  FAIL("no multi-support instance found");
  return SparsePosterior{};
}

}  // namespace

TEST_CASE("point-mass posterior has a zero Jacobian") {
  ArcScores s = ArcScores::zeros(1);
  s.at(0, 1) = 4.0;
  const SparsePosterior post = sparsemap(s);
  REQUIRE(post.support_size() == 1);
  const PosteriorJacobian jac = posterior_jacobian(post);
  CHECK(std::abs(jac.D(0, 0)) <= 1e-10);
}

TEST_CASE("Jacobian is symmetric with vanishing row and column sums") {
  Rng rng(555);
  for (int trial = 0; trial < 20; ++trial) {
    ArcScores s;
    const SparsePosterior post = spread_instance(3, rng, s);
    const PosteriorJacobian jac = posterior_jacobian(post);
    const int k = post.support_size();
    for (int i = 0; i < k; ++i) {
      double row = 0.0, col = 0.0;
      for (int j = 0; j < k; ++j) {
        CHECK(std::abs(jac.D(i, j) - jac.D(j, i)) <= 1e-10);
        row += jac.D(i, j);
        col += jac.D(j, i);
      }
      CHECK(std::abs(row) <= 1e-10);
      CHECK(std::abs(col) <= 1e-10);
    }
  }
}

TEST_CASE("posterior_jacobian requires a converged posterior") {
  SolverConfig tight;
  tight.max_iterations = 1;
  const SparsePosterior post = sparsemap(ArcScores::zeros(3), tight);
  REQUIRE_FALSE(post.converged);
  CHECK_THROWS_AS(posterior_jacobian(post), ContractError);
}

TEST_CASE("Jacobian matches finite differences of the QP over tree scores") {
  Rng rng(90210);
  const double eps = 1e-5;
  const int n = 3;
  const auto trees = enumerate_trees(n);
  int checked = 0;

  for (int trial = 0; trial < 60 && checked < 12; ++trial) {
    ArcScores s;
    const SparsePosterior post = spread_instance(n, rng, s);
    Vec f(trees.size());
    for (size_t i = 0; i < trees.size(); ++i) f[i] = tree_score(trees[i], s);

    // Dense index of every support tree.
    std::vector<int> dense_idx(post.support_size());
    for (int i = 0; i < post.support_size(); ++i) {
      const auto it = std::find(trees.begin(), trees.end(), post.support[i]);
      REQUIRE(it != trees.end());
      dense_idx[i] = static_cast<int>(it - trees.begin());
    }

    const PosteriorJacobian jac = posterior_jacobian(post);
    const auto base_support = sparse_support(post);
    bool boundary = false;

    for (int j = 0; j < post.support_size() && !boundary; ++j) {
      Vec f_plus = f, f_minus = f;
      f_plus[dense_idx[j]] += eps;
      f_minus[dense_idx[j]] -= eps;
      const DensePosterior plus = qp_posterior_over_trees(trees, f_plus, n, 1e-12, 400000);
      const DensePosterior minus = qp_posterior_over_trees(trees, f_minus, n, 1e-12, 400000);
      REQUIRE(plus.converged);
      REQUIRE(minus.converged);
      if (dense_support(plus) != base_support || dense_support(minus) != base_support) {
        boundary = true;  // support changed across the stencil: resample
        break;
      }
      for (int i = 0; i < post.support_size(); ++i) {
        const double fd =
            (plus.p[dense_idx[i]] - minus.p[dense_idx[i]]) / (2.0 * eps);
        CHECK(relative_close(jac.D(i, j), fd, 1e-4, 1.0));
      }
    }
    if (!boundary) ++checked;
  }
  CHECK(checked >= 12);
}

TEST_CASE("Jacobian-vector products match directional finite differences") {
  Rng rng(31337);
  const double eps = 1e-5;
  const int n = 3;
  const auto trees = enumerate_trees(n);

  int checked = 0;
  for (int trial = 0; trial < 40 && checked < 8; ++trial) {
    ArcScores s;
    const SparsePosterior post = spread_instance(n, rng, s);
    Vec f(trees.size());
    for (size_t i = 0; i < trees.size(); ++i) f[i] = tree_score(trees[i], s);
    std::vector<int> dense_idx(post.support_size());
    for (int i = 0; i < post.support_size(); ++i)
      dense_idx[i] = static_cast<int>(
          std::find(trees.begin(), trees.end(), post.support[i]) - trees.begin());

    Vec v(post.support_size());
    for (double& x : v) x = rng.uniform(-1.0, 1.0);

    Vec f_plus = f, f_minus = f;
    for (int i = 0; i < post.support_size(); ++i) {
      f_plus[dense_idx[i]] += eps * v[i];
      f_minus[dense_idx[i]] -= eps * v[i];
    }
    const DensePosterior plus = qp_posterior_over_trees(trees, f_plus, n, 1e-12, 400000);
    const DensePosterior minus = qp_posterior_over_trees(trees, f_minus, n, 1e-12, 400000);
    if (dense_support(plus) != sparse_support(post) ||
        dense_support(minus) != sparse_support(post))
      continue;

    const PosteriorJacobian jac = posterior_jacobian(post);
    const Vec dv = matvec(jac.D, v);
    for (int i = 0; i < post.support_size(); ++i) {
      const double fd = (plus.p[dense_idx[i]] - minus.p[dense_idx[i]]) / (2.0 * eps);
      CHECK(relative_close(dv[i], fd, 1e-4, 1.0));
    }
    ++checked;
  }
  CHECK(checked >= 8);
}

TEST_CASE("grad_scores vanishes for point masses and constant weights") {
  ArcScores s = ArcScores::zeros(1);
  s.at(0, 1) = 1.0;
  const SparsePosterior single = sparsemap(s);
  const Vec g_single = grad_scores(single, Vec{3.0});
  for (double v : g_single) CHECK(std::abs(v) <= 1e-10);

  Rng rng(246);
  ArcScores spread;
  const SparsePosterior post = spread_instance(3, rng, spread);
  const Vec g_const = grad_scores(post, Vec(post.support_size(), 0.7));
  for (double v : g_const) CHECK(std::abs(v) <= 1e-9);

  CHECK_THROWS_AS(grad_scores(post, Vec(post.support_size() + 1, 0.0)), InputError);
}

TEST_CASE("grad_scores matches finite differences through the full solve") {
  Rng rng(987654);
  const double eps = 1e-5;
  const int n = 3;

  int checked = 0;
  for (int trial = 0; trial < 40 && checked < 6; ++trial) {
    ArcScores s;
    const SparsePosterior post = spread_instance(n, rng, s);
    Vec gbar(post.support_size());
    for (double& v : gbar) v = rng.uniform(-1.0, 1.0);
    const Vec g = grad_scores(post, gbar);
    const auto base_support = sparse_support(post);

    auto weighted_mass = [&](const SparsePosterior& p) {
      double total = 0.0;
      for (int i = 0; i < p.support_size(); ++i) {
        const auto it = std::find(post.support.begin(), post.support.end(), p.support[i]);
        if (it != post.support.end())
          total += gbar[static_cast<size_t>(it - post.support.begin())] * p.q[i];
      }
      return total;
    };

    bool boundary = false;
    for (int mod = 1; mod <= n && !boundary; ++mod) {
      for (int head = 0; head <= n && !boundary; ++head) {
        if (head == mod) continue;
        ArcScores plus = s, minus = s;
        plus.at(head, mod) += eps;
        minus.at(head, mod) -= eps;
        const SparsePosterior post_plus = sparsemap(plus);
        const SparsePosterior post_minus = sparsemap(minus);
        if (sparse_support(post_plus) != base_support ||
            sparse_support(post_minus) != base_support) {
          boundary = true;
          break;
        }
        const double fd = (weighted_mass(post_plus) - weighted_mass(post_minus)) / (2.0 * eps);
        CHECK(relative_close(g[arc_slot(head, mod, n)], fd, 1e-4, 1e-2));
      }
    }
    if (!boundary) ++checked;
  }
  CHECK(checked >= 6);
}

TEST_CASE("expectation_backward on a hand-built two-tree posterior") {
  // Trees {[0,1],[2,0]} share no arcs, so the Gram is 2I and Z = I/2.
  SparsePosterior post;
  post.n = 2;
  post.support = {DepTree{{0, 1}}, DepTree{{2, 0}}};
  post.q = {0.5, 0.5};
  post.u = arc_marginals(post.support, post.q, 2);
  post.Z = Mat(2, 2);
  post.Z(0, 0) = post.Z(1, 1) = 0.5;
  post.tau = 0.0;
  post.converged = true;

  // D = Z - sigma sigma^T / zeta with sigma = (1/2, 1/2), zeta = 1.
  const PosteriorJacobian jac = posterior_jacobian(post);
  CHECK(std::abs(jac.D(0, 0) - 0.25) <= 1e-12);
  CHECK(std::abs(jac.D(0, 1) + 0.25) <= 1e-12);
  CHECK(std::abs(jac.D(1, 1) - 0.25) <= 1e-12);

  const std::vector<Vec> values = {Vec{1.0}, Vec{0.0}};
  const ExpectationGrad grad = expectation_backward(post, values, Vec{1.0});
  CHECK(grad.tree_weights == Vec{0.5, 0.5});
  // gbar = (1, 0): +1/4 on the first tree's arcs, -1/4 on the second's.
  CHECK(std::abs(grad.arc_grad[arc_slot(0, 1, 2)] - 0.25) <= 1e-12);
  CHECK(std::abs(grad.arc_grad[arc_slot(1, 2, 2)] - 0.25) <= 1e-12);
  CHECK(std::abs(grad.arc_grad[arc_slot(2, 1, 2)] + 0.25) <= 1e-12);
  CHECK(std::abs(grad.arc_grad[arc_slot(0, 2, 2)] + 0.25) <= 1e-12);

  CHECK_THROWS_AS(expectation_backward(post, {Vec{1.0}}, Vec{1.0}), ContractError);
  CHECK_THROWS_AS(expectation_backward(post, values, Vec{1.0, 2.0}), ContractError);
}

TEST_CASE("identical downstream values across support give zero arc gradient") {
  Rng rng(777);
  ArcScores s;
  const SparsePosterior post = spread_instance(3, rng, s);
  std::vector<Vec> values(post.support_size(), Vec{0.3, 0.7});
  const ExpectationGrad grad = expectation_backward(post, values, Vec{1.0, -1.0});
  for (double v : grad.arc_grad) CHECK(std::abs(v) <= 1e-9);
  CHECK(grad.tree_weights == post.q);
}

TEST_CASE("arc gradient decomposes as the indicator-weighted Jacobian product") {
  Rng rng(1618);
  for (int n = 2; n <= 4; ++n) {
    ArcScores s;
    const SparsePosterior post = spread_instance(n, rng, s);
    Vec gbar(post.support_size());
    for (double& v : gbar) v = rng.uniform(-1.0, 1.0);
    const Vec g = grad_scores(post, gbar);

    const PosteriorJacobian jac = posterior_jacobian(post);
    const Vec w = matvec(jac.D, gbar);
    Vec dense(arc_slot_count(n), 0.0);
    for (int i = 0; i < post.support_size(); ++i) {
      const auto ind = tree_indicator(post.support[i]);
      for (size_t slot = 0; slot < dense.size(); ++slot)
        if (ind.bits[slot]) dense[slot] += w[i];
    }
    for (size_t slot = 0; slot < dense.size(); ++slot)
      CHECK(std::abs(g[slot] - dense[slot]) <= 1e-12);
  }
}

TEST_CASE("non-support probabilities stay zero inside the support region") {
  Rng rng(13579);
  int checked = 0;
  for (int trial = 0; trial < 30 && checked < 8; ++trial) {
    ArcScores s;
    const SparsePosterior post = spread_instance(3, rng, s);
    const auto base = sparse_support(post);
    ArcScores nudged = s;
    for (double& v : nudged.s) v += rng.uniform(-1e-6, 1e-6);
    const SparsePosterior moved = sparsemap(nudged);
    if (sparse_support(moved) != base) continue;  // crossed a boundary
    for (const auto& t : moved.support) CHECK(base.count(t.heads) == 1);
    ++checked;
  }
  CHECK(checked >= 8);
}
