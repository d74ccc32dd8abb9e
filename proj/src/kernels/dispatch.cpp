#include "dyadflow/kernels/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace dyadflow::kernels {

namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(_M_X64)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa detect() {
  if (const char* env = std::getenv("DYADFLOW_ISA")) {
    const std::string want(env);
    if (want == "scalar") return Isa::scalar;
    if (want == "avx2" && cpu_has_avx2()) return Isa::avx2;
  }
  return cpu_has_avx2() ? Isa::avx2 : Isa::scalar;
}

std::atomic<Isa>& current() {
  static std::atomic<Isa> isa{detect()};
  return isa;
}

}  // namespace

Isa active_isa() { return current().load(std::memory_order_relaxed); }

bool isa_available(Isa isa) { return isa == Isa::scalar || cpu_has_avx2(); }

void force_isa(Isa isa) {
  if (!isa_available(isa)) throw std::runtime_error("requested ISA not supported by this CPU");
  current().store(isa, std::memory_order_relaxed);
}

std::string_view isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  if (active_isa() == Isa::avx2) return avx2::gemm_nn(a, b, c, m, k, n, accumulate);
  scalar::gemm_nn(a, b, c, m, k, n, accumulate);
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  if (active_isa() == Isa::avx2) return avx2::gemm_nt(a, b, c, m, k, n, accumulate);
  scalar::gemm_nt(a, b, c, m, k, n, accumulate);
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  if (active_isa() == Isa::avx2) return avx2::gemm_tn(a, b, c, m, k, n, accumulate);
  scalar::gemm_tn(a, b, c, m, k, n, accumulate);
}

template <typename T>
T dot(const T* x, const T* y, std::size_t n) {
  if (active_isa() == Isa::avx2) return avx2::dot(x, y, n);
  return scalar::dot(x, y, n);
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  if (active_isa() == Isa::avx2) return avx2::axpy(alpha, x, y, n);
  scalar::axpy(alpha, x, y, n);
}

#define DYADFLOW_INSTANTIATE(T)                                                                     \
  template void gemm_nn<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool); \
  template void gemm_nt<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool); \
  template void gemm_tn<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool); \
  template T dot<T>(const T*, const T*, std::size_t);                                             \
  template void axpy<T>(T, const T*, T*, std::size_t);

DYADFLOW_INSTANTIATE(float)
DYADFLOW_INSTANTIATE(double)
#undef DYADFLOW_INSTANTIATE

}  // namespace dyadflow::kernels
