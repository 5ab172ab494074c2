#pragma once

// Dense double-precision inner loops used by the tensor core.
//
// Every kernel has a scalar reference implementation and, where the CPU
// supports it, an AVX2+FMA variant. The active table is chosen once at
// startup (CPUID) and can be forced with TERSE_SIMD=scalar|avx2.
//
// matmul-family kernels accumulate each output element as a single ordered
// fused-multiply-add chain over the inner index, so scalar and AVX2 results
// are bit-identical. Reductions (dot, sum_squares) split the chain across
// lanes and agree only to rounding.

#include <cstddef>
#include <string_view>

namespace terse::simd {

struct KernelTable {
  std::string_view name;

  // sum_i a[i] * b[i]
  double (*dot)(const double* a, const double* b, std::size_t n);
  // sum_i a[i]^2
  double (*sum_squares)(const double* a, std::size_t n);
  // y[i] += alpha * x[i]
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // C[m,n] (+)= A[m,k] * B[k,n]; row-major, leading dims = column counts.
  void (*matmul)(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n, bool accumulate);
  // C[k,n] (+)= A[m,k]^T * B[m,n]
  void (*matmul_tn)(const double* a, const double* b, double* c,
                    std::size_t m, std::size_t k, std::size_t n,
                    bool accumulate);
};

const KernelTable& scalar_kernels();
// nullptr when the binary was built without AVX2 support.
const KernelTable* avx2_kernels();

bool cpu_has_avx2_fma();

// Currently active table.
const KernelTable& kernels();

// Force a backend by name ("scalar", "avx2", "auto"). Returns false when the
// requested backend is unavailable; the active table is then unchanged.
bool select_backend(std::string_view name);

}  // namespace terse::simd
