#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "lagdiff/tensor.hpp"
#include "lagdiff/text.hpp"
#include "lagdiff/unet.hpp"

namespace test_util {

// Singular values of a row-major m x n matrix via one-sided Jacobi on A^T A.
// Independent of the library's linear algebra; test-oracle use only.
inline std::vector<double> singular_values(const std::vector<double>& a, int m, int n) {
  std::vector<double> g(size_t(n) * n, 0.0);  // gram = A^T A
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < n; ++p)
      for (int q = 0; q < n; ++q)
        g[size_t(p) * n + q] += a[size_t(i) * n + p] * a[size_t(i) * n + q];

  // Cyclic Jacobi eigenvalue iteration on the symmetric gram matrix.
  for (int sweep = 0; sweep < 60; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += g[size_t(p) * n + q] * g[size_t(p) * n + q];
    if (off < 1e-30) break;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) {
        double apq = g[size_t(p) * n + q];
        if (std::fabs(apq) < 1e-300) continue;
        double app = g[size_t(p) * n + p], aqq = g[size_t(q) * n + q];
        double theta = 0.5 * std::atan2(2.0 * apq, aqq - app);
        double c = std::cos(theta), s = std::sin(theta);
        for (int k = 0; k < n; ++k) {
          double gkp = g[size_t(k) * n + p], gkq = g[size_t(k) * n + q];
          g[size_t(k) * n + p] = c * gkp - s * gkq;
          g[size_t(k) * n + q] = s * gkp + c * gkq;
        }
        for (int k = 0; k < n; ++k) {
          double gpk = g[size_t(p) * n + k], gqk = g[size_t(q) * n + k];
          g[size_t(p) * n + k] = c * gpk - s * gqk;
          g[size_t(q) * n + k] = s * gpk + c * gqk;
        }
      }
  }
  std::vector<double> sv(size_t(n));
  for (int i = 0; i < n; ++i) sv[size_t(i)] = std::sqrt(std::max(0.0, g[size_t(i) * n + i]));
  std::sort(sv.rbegin(), sv.rend());
  return sv;
}

inline int numerical_rank(const std::vector<double>& a, int m, int n, double rel_tol = 1e-9) {
  auto sv = singular_values(a, m, n);
  if (sv.empty() || sv[0] == 0.0) return 0;
  int r = 0;
  for (double s : sv)
    if (s > rel_tol * sv[0]) ++r;
  return r;
}

inline lagdiff::Vocabulary tiny_vocab(uint64_t seed = 0) {
  using namespace lagdiff;
  return Vocabulary::build({"a", "photo", "of", "dog", "cat", "car", "on", "grass"}, 32, seed);
}

}  // namespace test_util
