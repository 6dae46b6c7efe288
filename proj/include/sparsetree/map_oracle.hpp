#pragma once

// Exact MAP inference: the maximum-weight rooted arborescence, both by the
// recursive Chu-Liu/Edmonds algorithm (dense, O(n^3)) and by brute-force
// enumeration for cross-checking at small n.
//
// Ties are broken toward the lexicographically smallest head vector. Instead
// of perturbing the stored scores, every arc carries an exact integer key
// h * (n+1)^(n-m); key sums order head vectors positionally, so comparing
// (score, key) pairs lexicographically realizes an infinitesimal perturbation
// without any floating-point change. Keys fit __int128 for n <= 26; beyond
// that ties fall back to plain score comparison (still deterministic).

#include <algorithm>
#include <string>
#include <vector>

#include "sparsetree/errors.hpp"
#include "sparsetree/structures.hpp"

namespace sparsetree {

namespace detail {

struct ArcWeight {
  double score = 0.0;
  __int128 tie = 0;  // smaller is preferred among equal scores

  ArcWeight operator+(const ArcWeight& o) const { return {score + o.score, tie + o.tie}; }
  ArcWeight operator-(const ArcWeight& o) const { return {score - o.score, tie - o.tie}; }
};

inline bool weight_better(const ArcWeight& a, const ArcWeight& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.tie < b.tie;
}

inline __int128 lex_tie_key(int head, int modifier, int n) {
  if (n > 26) return 0;
  __int128 w = 1;
  for (int k = 0; k < n - modifier; ++k) w *= n + 1;
  return w * head;
}

// One contraction level of Chu-Liu/Edmonds. `active` lists live node ids
// (index 0 is the root), `w`/`present` give arcs between them. Returns the
// chosen head for every non-root active node, in node-id space.
inline void edmonds_level(const std::vector<int>& active,
                          std::vector<std::vector<ArcWeight>>& w,
                          std::vector<std::vector<char>>& present,
                          int& next_id,
                          std::vector<int>& heads_out) {
  const int root = active[0];

  // Greedy best incoming arc per non-root node.
  std::vector<int> best_in(w.size(), -1);
  for (size_t vi = 1; vi < active.size(); ++vi) {
    const int v = active[vi];
    int best = -1;
    for (int u : active) {
      if (u == v || !present[u][v]) continue;
      if (best < 0 || weight_better(w[u][v], w[best][v])) best = u;
    }
    if (best < 0) throw NumericalError("map_tree: node with no incoming arc");
    best_in[v] = best;
  }

  // Look for a cycle in the greedy selection.
  std::vector<int> state(w.size(), 0);  // 0 unseen, 1 on path, 2 done
  state[root] = 2;
  std::vector<int> cycle;
  for (size_t vi = 1; vi < active.size() && cycle.empty(); ++vi) {
    int v = active[vi];
    std::vector<int> path;
    while (state[v] == 0) {
      state[v] = 1;
      path.push_back(v);
      v = best_in[v];
    }
    if (state[v] == 1) {
      // Walk the tail of `path` back to v: that is the cycle.
      auto it = std::find(path.begin(), path.end(), v);
      cycle.assign(it, path.end());
    }
    for (int p : path)
      if (state[p] == 1) state[p] = 2;
  }

  if (cycle.empty()) {
    for (size_t vi = 1; vi < active.size(); ++vi)
      heads_out[active[vi]] = best_in[active[vi]];
    return;
  }

  // Contract the cycle into a fresh supernode.
  const int super = next_id++;
  std::vector<char> in_cycle(w.size(), 0);
  for (int v : cycle) in_cycle[v] = 1;

  std::vector<int> reduced;
  reduced.reserve(active.size());
  for (int v : active)
    if (!in_cycle[v]) reduced.push_back(v);
  reduced.push_back(super);

  // entry_via[u]: cycle node whose incoming arc from u realizes w[u][super].
  // exit_via[v]: cycle node whose outgoing arc realizes w[super][v].
  std::vector<int> entry_via(w.size(), -1), exit_via(w.size(), -1);
  for (int u : reduced) {
    if (u == super) continue;
    for (int v : cycle) {
      if (!present[u][v]) continue;
      ArcWeight adjusted = w[u][v] - w[best_in[v]][v];
      if (!present[u][super] || weight_better(adjusted, w[u][super])) {
        w[u][super] = adjusted;
        present[u][super] = 1;
        entry_via[u] = v;
      }
    }
  }
  for (int v : reduced) {
    if (v == super || v == root) continue;
    for (int u : cycle) {
      if (!present[u][v]) continue;
      if (!present[super][v] || weight_better(w[u][v], w[super][v])) {
        w[super][v] = w[u][v];
        present[super][v] = 1;
        exit_via[v] = u;
      }
    }
  }

  edmonds_level(reduced, w, present, next_id, heads_out);

  // Expand the supernode: the arc entering it breaks the cycle at one node.
  const int enter_from = heads_out[super];
  const int broken = entry_via[enter_from];
  for (int v : cycle) heads_out[v] = (v == broken) ? enter_from : best_in[v];
  for (int v : reduced) {
    if (v != super && v != root && heads_out[v] == super) heads_out[v] = exit_via[v];
  }
}

}  // namespace detail

// Maximum-scoring arborescence; ties resolved to the lexicographically
// smallest head vector. Rejects non-finite scores.
inline DepTree map_tree(const ArcScores& scores) {
  const int n = scores.n;
  if (n < 1) throw InputError("map_tree: need n >= 1");
  if (!scores.all_finite()) throw InputError("map_tree: scores must be finite");

  const int capacity = 2 * (n + 1);
  std::vector<std::vector<detail::ArcWeight>> w(
      capacity, std::vector<detail::ArcWeight>(capacity));
  std::vector<std::vector<char>> present(capacity, std::vector<char>(capacity, 0));
  for (int mod = 1; mod <= n; ++mod) {
    for (int head = 0; head <= n; ++head) {
      if (head == mod) continue;
      w[head][mod] = {scores.at(head, mod), detail::lex_tie_key(head, mod, n)};
      present[head][mod] = 1;
    }
  }

  std::vector<int> active(n + 1);
  for (int i = 0; i <= n; ++i) active[i] = i;
  std::vector<int> heads_out(capacity, -1);
  int next_id = n + 1;
  detail::edmonds_level(active, w, present, next_id, heads_out);

  DepTree tree;
  tree.heads.assign(heads_out.begin() + 1, heads_out.begin() + 1 + n);
  if (!is_valid_tree(tree)) throw ContractError("map_tree: produced an invalid tree");
  return tree;
}

// Exhaustive argmax over all enumerated trees with the identical tie rule.
inline DepTree map_brute(const ArcScores& scores) {
  const int n = scores.n;
  if (n > kMaxEnumerableTokens)
    throw SizeLimitError("map_brute: n must be <= " + std::to_string(kMaxEnumerableTokens));
  if (!scores.all_finite()) throw InputError("map_brute: scores must be finite");

  const std::vector<DepTree> trees = enumerate_trees(n);
  int best = -1;
  detail::ArcWeight best_w{0.0, 0};
  for (size_t i = 0; i < trees.size(); ++i) {
    detail::ArcWeight total{tree_score(trees[i], scores), 0};
    for (int t = 1; t <= n; ++t)
      total.tie += detail::lex_tie_key(trees[i].head_of(t), t, n);
    if (best < 0 || detail::weight_better(total, best_w)) {
      best = static_cast<int>(i);
      best_w = total;
    }
  }
  return trees[best];
}

}  // namespace sparsetree
