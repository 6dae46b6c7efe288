#pragma once

// Core combinatorial types for rooted non-projective dependency trees:
// sentences, arcs, dense arc-score tables, head-vector trees, arc indicator
// vectors, and exhaustive enumeration at small sizes (the oracle substrate
// for everything downstream).

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sparsetree/errors.hpp"

namespace sparsetree {

// Token count above which exhaustive enumeration is refused.
inline constexpr int kMaxEnumerableTokens = 6;

// A sentence is a list of vocabulary ids; token positions are 1-based in
// tree coordinates (position 0 is the root symbol).
struct Sentence {
  std::vector<int> token_ids;

  int n() const { return static_cast<int>(token_ids.size()); }
};

// Directed arc head -> modifier. head in [0, n] (0 is the root symbol),
// modifier in [1, n], head != modifier.
struct Arc {
  int head = 0;
  int modifier = 0;
};

// Flat slot index for arc (head, modifier) in the dense (n+1) x n table.
// Head-major layout; self-arc slots (head == modifier) exist but are never
// set or read.
inline int arc_slot(int head, int modifier, int n) {
  return head * n + (modifier - 1);
}

inline int arc_slot_count(int n) { return (n + 1) * n; }

// Number of legal (non-self) arcs: n heads-or-root choices per modifier.
inline int legal_arc_count(int n) { return n * n; }

// Dense real score for every (head, modifier) arc of a length-n sentence.
struct ArcScores {
  int n = 0;
  std::vector<double> s;  // size (n+1)*n, head-major; self slots stay 0

  static ArcScores zeros(int n) {
    ArcScores sc;
    sc.n = n;
    sc.s.assign(arc_slot_count(n), 0.0);
    return sc;
  }

  double at(int head, int modifier) const { return s[arc_slot(head, modifier, n)]; }
  double& at(int head, int modifier) { return s[arc_slot(head, modifier, n)]; }

  // True when every legal arc entry is finite.
  bool all_finite() const {
    for (int mod = 1; mod <= n; ++mod)
      for (int head = 0; head <= n; ++head)
        if (head != mod && !std::isfinite(at(head, mod))) return false;
    return true;
  }
};

// A rooted arborescence encoded as a head vector: heads[i] is the head of
// token i+1 and lies in [0, n]. The root (0) may have several children.
struct DepTree {
  std::vector<int> heads;

  int n() const { return static_cast<int>(heads.size()); }
  int head_of(int token) const { return heads[token - 1]; }

  bool operator==(const DepTree& other) const { return heads == other.heads; }
};

// Binary arc-indicator vector m_h laid out like ArcScores (self slots always
// zero). Exactly n bits are set, one per modifier.
struct IndicatorVector {
  int n = 0;
  std::vector<std::uint8_t> bits;
};

// True iff `heads` encodes a valid arborescence: entries in range, no
// self-heads, acyclic, every token reaches the root. Malformed input simply
// returns false.
inline bool is_valid_tree(const std::vector<int>& heads) {
  const int n = static_cast<int>(heads.size());
  if (n == 0) return false;
  for (int i = 0; i < n; ++i) {
    if (heads[i] < 0 || heads[i] > n || heads[i] == i + 1) return false;
  }
  // Walk up from every token; a valid tree reaches the root within n steps.
  for (int i = 1; i <= n; ++i) {
    int node = i;
    int steps = 0;
    while (node != 0) {
      node = heads[node - 1];
      if (++steps > n) return false;
    }
  }
  return true;
}

inline bool is_valid_tree(const DepTree& tree) { return is_valid_tree(tree.heads); }

// All arborescences over n tokens, each exactly once, ordered
// lexicographically by head vector. Count is (n+1)^(n-1).
inline std::vector<DepTree> enumerate_trees(int n) {
  if (n < 1 || n > kMaxEnumerableTokens) {
    throw SizeLimitError("enumerate_trees: n must be in [1, " +
                         std::to_string(kMaxEnumerableTokens) + "], got " +
                         std::to_string(n));
  }
  std::vector<DepTree> trees;
  std::vector<int> heads(n, 0);
  while (true) {
    if (is_valid_tree(heads)) trees.push_back(DepTree{heads});
    // Odometer increment keeps the lexicographic order.
    int pos = n - 1;
    while (pos >= 0) {
      if (++heads[pos] <= n) break;
      heads[pos] = 0;
      --pos;
    }
    if (pos < 0) break;
  }
  return trees;
}

// Indicator column m_h of the tree: one set bit per (head_of(t), t) arc.
inline IndicatorVector tree_indicator(const DepTree& tree) {
  if (!is_valid_tree(tree)) throw ContractError("tree_indicator: invalid tree");
  const int n = tree.n();
  IndicatorVector ind;
  ind.n = n;
  ind.bits.assign(arc_slot_count(n), 0);
  for (int t = 1; t <= n; ++t) ind.bits[arc_slot(tree.head_of(t), t, n)] = 1;
  return ind;
}

// Arc-factored tree score: sum of the n arc scores selected by the tree.
inline double tree_score(const DepTree& tree, const ArcScores& scores) {
  if (tree.n() != scores.n)
    throw InputError("tree_score: tree has " + std::to_string(tree.n()) +
                     " tokens but scores expect " + std::to_string(scores.n));
  double total = 0.0;
  for (int t = 1; t <= tree.n(); ++t) total += scores.at(tree.head_of(t), t);
  return total;
}

}  // namespace sparsetree
