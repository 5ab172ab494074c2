// Compiled with -mavx2 -mfma. Only reached after a CPUID check.
#include "terse/simd/kernels.hpp"

#include <immintrin.h>

#include <cmath>

namespace terse::simd {
namespace {

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d sh = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4)
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  double s = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s = std::fma(a[i], b[i], s);
  return s;
}

double sum_squares_avx2(const double* a, std::size_t n) { return dot_avx2(a, a, n); }

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

// R rows of C, columns [j, j+8). a_at(r, p) gives the left operand.
template <int R, class AAt>
inline void tile8(AAt a_at, const double* b, double* c, std::size_t ldc,
                  std::size_t k, std::size_t n, std::size_t j, bool accumulate) {
  __m256d acc[R][2];
  for (int r = 0; r < R; ++r) {
    if (accumulate) {
      acc[r][0] = _mm256_loadu_pd(c + r * ldc + j);
      acc[r][1] = _mm256_loadu_pd(c + r * ldc + j + 4);
    } else {
      acc[r][0] = _mm256_setzero_pd();
      acc[r][1] = _mm256_setzero_pd();
    }
  }
  for (std::size_t p = 0; p < k; ++p) {
    const __m256d b0 = _mm256_loadu_pd(b + p * n + j);
    const __m256d b1 = _mm256_loadu_pd(b + p * n + j + 4);
    for (int r = 0; r < R; ++r) {
      const __m256d av = _mm256_set1_pd(a_at(r, p));
      acc[r][0] = _mm256_fmadd_pd(av, b0, acc[r][0]);
      acc[r][1] = _mm256_fmadd_pd(av, b1, acc[r][1]);
    }
  }
  for (int r = 0; r < R; ++r) {
    _mm256_storeu_pd(c + r * ldc + j, acc[r][0]);
    _mm256_storeu_pd(c + r * ldc + j + 4, acc[r][1]);
  }
}

template <int R, class AAt>
inline void tile4(AAt a_at, const double* b, double* c, std::size_t ldc,
                  std::size_t k, std::size_t n, std::size_t j, bool accumulate) {
  __m256d acc[R];
  for (int r = 0; r < R; ++r)
    acc[r] = accumulate ? _mm256_loadu_pd(c + r * ldc + j) : _mm256_setzero_pd();
  for (std::size_t p = 0; p < k; ++p) {
    const __m256d b0 = _mm256_loadu_pd(b + p * n + j);
    for (int r = 0; r < R; ++r) acc[r] = _mm256_fmadd_pd(_mm256_set1_pd(a_at(r, p)), b0, acc[r]);
  }
  for (int r = 0; r < R; ++r) _mm256_storeu_pd(c + r * ldc + j, acc[r]);
}

template <int R, class AAt>
inline void row_block(AAt a_at, const double* b, double* c, std::size_t k,
                      std::size_t n, bool accumulate) {
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) tile8<R>(a_at, b, c, n, k, n, j, accumulate);
  for (; j + 4 <= n; j += 4) tile4<R>(a_at, b, c, n, k, n, j, accumulate);
  for (; j < n; ++j) {
    for (int r = 0; r < R; ++r) {
      double s = accumulate ? c[r * n + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) s = std::fma(a_at(r, p), b[p * n + j], s);
      c[r * n + j] = s;
    }
  }
}

template <class MakeAAt>
void blocked(MakeAAt make, const double* b, double* c, std::size_t rows,
             std::size_t k, std::size_t n, bool accumulate) {
  std::size_t i = 0;
  for (; i + 4 <= rows; i += 4) row_block<4>(make(i), b, c + i * n, k, n, accumulate);
  switch (rows - i) {
    case 3: row_block<3>(make(i), b, c + i * n, k, n, accumulate); break;
    case 2: row_block<2>(make(i), b, c + i * n, k, n, accumulate); break;
    case 1: row_block<1>(make(i), b, c + i * n, k, n, accumulate); break;
    default: break;
  }
}

void matmul_avx2(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n, bool accumulate) {
  blocked(
      [a, k](std::size_t i0) {
        return [row = a + i0 * k, k](int r, std::size_t p) { return row[r * k + p]; };
      },
      b, c, m, k, n, accumulate);
}

void matmul_tn_avx2(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n, bool accumulate) {
  // Output rows index the columns of A; the chain runs over the m rows.
  blocked(
      [a, k](std::size_t r0) {
        return [col = a + r0, k](int r, std::size_t t) { return col[t * k + r]; };
      },
      b, c, k, m, n, accumulate);
}

}  // namespace

const KernelTable* avx2_kernels() {
  static const KernelTable table{"avx2",    dot_avx2,    sum_squares_avx2,
                                 axpy_avx2, matmul_avx2, matmul_tn_avx2};
  return &table;
}

}  // namespace terse::simd
