#pragma once

// Exact gradients through the SparseMAP posterior. On a neighborhood where
// the support is constant, the map f |-> q restricted to support trees is
// linear with Jacobian
//
//   D[h,h'] = z_{h,h'} - sigma(h) sigma(h') / zeta,
//
// where Z is the inverse support Gram, sigma its column sums and zeta their
// total; probabilities of non-support trees have zero derivative. Chaining
// through the arc-factored scores f(h) = sum_{a in h} s[a] gives the
// arc-score gradient used to train a parser end to end.

#include <vector>

#include "sparsetree/errors.hpp"
#include "sparsetree/inference.hpp"
#include "sparsetree/linalg.hpp"

namespace sparsetree {

struct PosteriorJacobian {
  Mat D;  // support x support; symmetric, zero row and column sums
};

inline PosteriorJacobian posterior_jacobian(const SparsePosterior& post) {
  if (!post.converged)
    throw ContractError("posterior_jacobian: posterior did not converge");
  const int k = post.support_size();
  Vec sigma(k, 0.0);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) sigma[i] += post.Z(i, j);
  double zeta = 0.0;
  for (double v : sigma) zeta += v;
  if (!(zeta > 0.0)) throw NumericalError("posterior_jacobian: zeta must be positive");

  PosteriorJacobian jac;
  jac.D = Mat(k, k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) jac.D(i, j) = post.Z(i, j) - sigma[i] * sigma[j] / zeta;
  return jac;
}

// Gradient of sum_h gbar(h) q(h) with respect to the arc scores:
//   g[a] = sum_{h,h'} gbar(h) D[h,h'] m_{h'}[a].
inline Vec grad_scores(const SparsePosterior& post, const Vec& gbar) {
  if (static_cast<int>(gbar.size()) != post.support_size())
    throw InputError("grad_scores: gbar must have one entry per support tree");
  const PosteriorJacobian jac = posterior_jacobian(post);
  const Vec w = matvec(jac.D, gbar);  // D symmetric, so D gbar = D^T gbar
  Vec g(arc_slot_count(post.n), 0.0);
  for (int i = 0; i < post.support_size(); ++i)
    for (int t = 1; t <= post.n; ++t)
      g[arc_slot(post.support[i].head_of(t), t, post.n)] += w[i];
  return g;
}

struct ExpectationGrad {
  Vec arc_grad;      // gradient w.r.t. arc scores (slot layout)
  Vec tree_weights;  // q(h): weights for backprop into per-tree computations
};

// Backward rule for rbar = sum_h q(h) r(h): given upstream = dL/drbar and the
// per-support-tree values r(h), returns the arc-score gradient (parser side)
// and the per-tree weights (downstream side).
inline ExpectationGrad expectation_backward(const SparsePosterior& post,
                                            const std::vector<Vec>& values,
                                            const Vec& upstream) {
  if (static_cast<int>(values.size()) != post.support_size())
    throw ContractError("expectation_backward: one value vector per support tree required");
  for (const Vec& v : values)
    if (v.size() != upstream.size())
      throw ContractError("expectation_backward: value/upstream dimension mismatch");

  Vec gbar(post.support_size(), 0.0);
  for (int i = 0; i < post.support_size(); ++i) gbar[i] = dot(upstream, values[i]);

  ExpectationGrad out;
  out.arc_grad = grad_scores(post, gbar);
  out.tree_weights = post.q;
  return out;
}

}  // namespace sparsetree
