#include "terse/simd/kernels.hpp"

#include <cmath>

namespace terse::simd {
namespace {

double dot_scalar(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s = std::fma(a[i], b[i], s);
  return s;
}

double sum_squares_scalar(const double* a, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s = std::fma(a[i], a[i], s);
  return s;
}

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

void matmul_scalar(const double* a, const double* b, double* c, std::size_t m,
                   std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] = std::fma(aip, brow[j], crow[j]);
    }
  }
}

void matmul_tn_scalar(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n,
                      bool accumulate) {
  if (!accumulate)
    for (std::size_t i = 0; i < k * n; ++i) c[i] = 0.0;
  for (std::size_t r = 0; r < k; ++r) {
    double* crow = c + r * n;
    for (std::size_t t = 0; t < m; ++t) {
      const double atr = a[t * k + r];
      const double* brow = b + t * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] = std::fma(atr, brow[j], crow[j]);
    }
  }
}

}  // namespace

const KernelTable& scalar_kernels() {
  static const KernelTable table{"scalar",        dot_scalar,   sum_squares_scalar,
                                 axpy_scalar,     matmul_scalar, matmul_tn_scalar};
  return table;
}

}  // namespace terse::simd
