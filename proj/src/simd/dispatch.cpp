#include <atomic>
#include <cstdlib>
#include <string>

#include "terse/simd/kernels.hpp"

namespace terse::simd {

#if !defined(TERSE_HAVE_AVX2)
const KernelTable* avx2_kernels() { return nullptr; }
#endif

bool cpu_has_avx2_fma() {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

namespace {

const KernelTable* best_available() {
  if (cpu_has_avx2_fma() && avx2_kernels() != nullptr) return avx2_kernels();
  return &scalar_kernels();
}

const KernelTable* initial_table() {
  const char* env = std::getenv("TERSE_SIMD");
  if (env != nullptr && std::string(env) == "scalar") return &scalar_kernels();
  return best_available();
}

std::atomic<const KernelTable*>& active() {
  static std::atomic<const KernelTable*> table{initial_table()};
  return table;
}

}  // namespace

const KernelTable& kernels() { return *active().load(std::memory_order_relaxed); }

bool select_backend(std::string_view name) {
  if (name == "scalar") {
    active().store(&scalar_kernels());
    return true;
  }
  if (name == "avx2") {
    if (!cpu_has_avx2_fma() || avx2_kernels() == nullptr) return false;
    active().store(avx2_kernels());
    return true;
  }
  if (name == "auto") {
    active().store(best_available());
    return true;
  }
  return false;
}

}  // namespace terse::simd
