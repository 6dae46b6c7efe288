#pragma once

// Minimal dense linear algebra used across the library. Everything here is
// desk-scale (matrices a few dozen rows at most), so plain loops win over a
// heavyweight dependency.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "sparsetree/errors.hpp"

namespace sparsetree {

using Vec = std::vector<double>;

struct Mat {
  int rows = 0, cols = 0;
  Vec a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {}

  double operator()(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }
  double& operator()(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
};

inline double dot(const Vec& x, const Vec& y) {
  double s = 0.0;
  for (size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

inline void axpy(double alpha, const Vec& x, Vec& y) {
  for (size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline double l2_norm(const Vec& x) { return std::sqrt(dot(x, x)); }

// y = M x
inline Vec matvec(const Mat& m, const Vec& x) {
  Vec y(m.rows, 0.0);
  for (int r = 0; r < m.rows; ++r) {
    double s = 0.0;
    for (int c = 0; c < m.cols; ++c) s += m(r, c) * x[c];
    y[r] = s;
  }
  return y;
}

// y = M^T x
inline Vec matTvec(const Mat& m, const Vec& x) {
  Vec y(m.cols, 0.0);
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) y[c] += m(r, c) * x[r];
  return y;
}

// M += r c^T
inline void add_outer(Mat& m, const Vec& r, const Vec& c) {
  for (int i = 0; i < m.rows; ++i)
    for (int j = 0; j < m.cols; ++j) m(i, j) += r[i] * c[j];
}

inline double log_sum_exp(const Vec& x) {
  const double hi = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double v : x) s += std::exp(v - hi);
  return hi + std::log(s);
}

inline Vec softmax(const Vec& x) {
  const double hi = *std::max_element(x.begin(), x.end());
  Vec p(x.size());
  double s = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    p[i] = std::exp(x[i] - hi);
    s += p[i];
  }
  for (double& v : p) v /= s;
  return p;
}

// Euclidean projection of v onto the probability simplex via the sort-based
// threshold rule.
inline Vec project_to_simplex(const Vec& v) {
  const int n = static_cast<int>(v.size());
  Vec sorted = v;
  std::sort(sorted.begin(), sorted.end(), std::greater<double>());
  double cum = 0.0, theta = 0.0;
  int support = 0;
  for (int i = 0; i < n; ++i) {
    cum += sorted[i];
    const double candidate = (cum - 1.0) / (i + 1);
    if (sorted[i] - candidate > 0.0) {
      theta = candidate;
      support = i + 1;
    }
  }
  (void)support;
  Vec p(n);
  for (int i = 0; i < n; ++i) p[i] = std::max(v[i] - theta, 0.0);
  return p;
}

}  // namespace sparsetree
