#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "sparsetree/map_oracle.hpp"
#include "sparsetree/rng.hpp"
#include "sparsetree/structures.hpp"

using namespace sparsetree;

namespace {

ArcScores random_scores(int n, Rng& rng, double lo = -2.0, double hi = 2.0) {
  ArcScores s = ArcScores::zeros(n);
  for (int mod = 1; mod <= n; ++mod)
    for (int head = 0; head <= n; ++head)
      if (head != mod) s.at(head, mod) = rng.uniform(lo, hi);
  return s;
}

}  // namespace

TEST_CASE("n=1 returns the unique tree regardless of scores") {
  ArcScores s = ArcScores::zeros(1);
  s.at(0, 1) = -7.5;
  CHECK(map_tree(s).heads == std::vector<int>{0});
  CHECK(map_brute(s).heads == std::vector<int>{0});
}

TEST_CASE("all-zero scores break ties toward the lexicographically smallest tree") {
  CHECK(map_tree(ArcScores::zeros(2)).heads == std::vector<int>{0, 0});
  CHECK(map_tree(ArcScores::zeros(4)).heads == std::vector<int>{0, 0, 0, 0});
  CHECK(map_brute(ArcScores::zeros(3)).heads == std::vector<int>{0, 0, 0});
}

TEST_CASE("map_brute picks the obvious chain") {
  ArcScores s = ArcScores::zeros(2);
  s.at(0, 1) = 5.0;
  s.at(1, 2) = 5.0;
  const DepTree best = map_brute(s);
  CHECK(best.heads == std::vector<int>{0, 1});
  CHECK(tree_score(best, s) == 10.0);
  CHECK(map_tree(s).heads == best.heads);
}

TEST_CASE("greedy per-modifier cycle is contracted into a valid tree") {
  // Arcs 1->2, 2->3, 3->1 dominate every alternative, so the greedy head
  // choice for every modifier forms a cycle; the result must still be a tree.
  ArcScores s = ArcScores::zeros(3);
  s.at(1, 2) = 10.0;
  s.at(2, 3) = 10.0;
  s.at(3, 1) = 10.0;
  s.at(0, 1) = 1.0;
  s.at(0, 2) = 1.0;
  s.at(0, 3) = 1.0;
  const DepTree tree = map_tree(s);
  REQUIRE(is_valid_tree(tree));
  CHECK(tree_score(tree, s) == tree_score(map_brute(s), s));
  CHECK(tree_score(tree, s) == 21.0);  // break the cycle, keep two 10-arcs
}

TEST_CASE("agrees with brute force on random instances for n up to 5") {
  Rng rng(20240513);
  for (int n = 1; n <= 5; ++n) {
    for (int trial = 0; trial < 100; ++trial) {
      const ArcScores s = random_scores(n, rng);
      const DepTree fast = map_tree(s);
      const DepTree brute = map_brute(s);
      REQUIRE(is_valid_tree(fast));
      CHECK(tree_score(fast, s) == tree_score(brute, s));
      CHECK(fast.heads == brute.heads);  // identical tie handling
    }
  }
}

TEST_CASE("tie handling matches brute force on coarse score grids") {
  // Dyadic score values from a tiny grid force many exact ties.
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = rng.uniform_int(2, 4);
    ArcScores s = ArcScores::zeros(n);
    for (int mod = 1; mod <= n; ++mod)
      for (int head = 0; head <= n; ++head)
        if (head != mod) s.at(head, mod) = 0.5 * rng.uniform_int(0, 2);
    CHECK(map_tree(s).heads == map_brute(s).heads);
  }
}

TEST_CASE("repeated calls return identical output") {
  Rng rng(99);
  const ArcScores s = random_scores(5, rng);
  const DepTree first = map_tree(s);
  for (int i = 0; i < 5; ++i) CHECK(map_tree(s).heads == first.heads);
}

TEST_CASE("shifting all arcs into one modifier keeps the argmax") {
  Rng rng(555);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 4;
    const ArcScores s = random_scores(n, rng);
    const DepTree base = map_tree(s);
    ArcScores shifted = s;
    const int mod = 1 + trial % n;
    for (int head = 0; head <= n; ++head)
      if (head != mod) shifted.at(head, mod) += 3.25;
    CHECK(map_tree(shifted).heads == base.heads);
  }
}

TEST_CASE("non-finite scores are rejected") {
  ArcScores s = ArcScores::zeros(2);
  s.at(0, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(map_tree(s), InputError);
  s.at(0, 1) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(map_tree(s), InputError);
  CHECK_THROWS_AS(map_brute(s), InputError);
}

TEST_CASE("map_brute refuses oversized inputs") {
  CHECK_THROWS_AS(map_brute(ArcScores::zeros(7)), SizeLimitError);
}
