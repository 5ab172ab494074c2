#pragma once
// Independent reference implementations used by unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>
#include <vector>

namespace oracle {

// Mean difference with long double accumulation.
inline std::vector<double> mean_difference(const std::vector<std::vector<double>>& a,
                                           const std::vector<std::vector<double>>& b) {
  const std::size_t d = a.front().size();
  std::vector<double> out(d);
  for (std::size_t j = 0; j < d; ++j) {
    long double sa = 0, sb = 0;
    for (const auto& r : a) sa += r[j];
    for (const auto& r : b) sb += r[j];
    out[j] = static_cast<double>(sa / static_cast<long double>(a.size()) - sb / static_cast<long double>(b.size()));
  }
  return out;
}

inline double reward(bool correct, double len, double min_len, double l1, double l2) {
  return (correct ? l1 : 0.0) - l2 * (len > min_len ? len - min_len : 0.0);
}

// Cyclic Jacobi eigen-decomposition of a symmetric matrix. Returns
// eigenvalues in descending order with unit eigenvectors as columns.
inline std::pair<std::vector<double>, std::vector<std::vector<double>>> jacobi_eigen(
    std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) v[i][i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k][p], vkq = v[k][q];
          v[k][p] = c * vkp - s * vkq;
          v[k][q] = s * vkp + c * vkq;
        }
      }
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return a[x][x] > a[y][y]; });
  std::vector<double> vals;
  std::vector<std::vector<double>> vecs;
  for (auto i : idx) {
    vals.push_back(a[i][i]);
    std::vector<double> col(n);
    for (std::size_t k = 0; k < n; ++k) col[k] = v[k][i];
    vecs.push_back(std::move(col));
  }
  return {vals, vecs};
}

// Sample covariance (divisor n) of row vectors.
inline std::vector<std::vector<double>> covariance(const std::vector<std::vector<double>>& pts) {
  const std::size_t n = pts.size(), d = pts.front().size();
  std::vector<double> mu(d, 0.0);
  for (const auto& p : pts)
    for (std::size_t j = 0; j < d; ++j) mu[j] += p[j] / static_cast<double>(n);
  std::vector<std::vector<double>> c(d, std::vector<double>(d, 0.0));
  for (const auto& p : pts)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) c[i][j] += (p[i] - mu[i]) * (p[j] - mu[j]) / static_cast<double>(n);
  return c;
}

inline double abs_cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return std::abs(ab) / std::sqrt(aa * bb);
}

}  // namespace oracle
