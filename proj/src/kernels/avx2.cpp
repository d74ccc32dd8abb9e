#include "dyadflow/kernels/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)
#define DYADFLOW_X86 1
#include <immintrin.h>
#else
#define DYADFLOW_X86 0
#endif

#include <algorithm>
#include <stdexcept>

namespace dyadflow::kernels::avx2 {

#if DYADFLOW_X86

#define DYADFLOW_AVX2 __attribute__((target("avx2,fma")))

namespace {

// Thin traits so one body serves both element types.
template <typename T>
struct Vec;

template <>
struct Vec<float> {
  using reg = __m256;
  static constexpr std::size_t width = 8;
  DYADFLOW_AVX2 static reg zero() { return _mm256_setzero_ps(); }
  DYADFLOW_AVX2 static reg load(const float* p) { return _mm256_loadu_ps(p); }
  DYADFLOW_AVX2 static void store(float* p, reg v) { _mm256_storeu_ps(p, v); }
  DYADFLOW_AVX2 static reg set1(float v) { return _mm256_set1_ps(v); }
  DYADFLOW_AVX2 static reg fmadd(reg a, reg b, reg c) { return _mm256_fmadd_ps(a, b, c); }
  DYADFLOW_AVX2 static float hsum(reg v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 shuf = _mm_movehdup_ps(lo);
    __m128 sums = _mm_add_ps(lo, shuf);
    shuf = _mm_movehl_ps(shuf, sums);
    sums = _mm_add_ss(sums, shuf);
    return _mm_cvtss_f32(sums);
  }
};

template <>
struct Vec<double> {
  using reg = __m256d;
  static constexpr std::size_t width = 4;
  DYADFLOW_AVX2 static reg zero() { return _mm256_setzero_pd(); }
  DYADFLOW_AVX2 static reg load(const double* p) { return _mm256_loadu_pd(p); }
  DYADFLOW_AVX2 static void store(double* p, reg v) { _mm256_storeu_pd(p, v); }
  DYADFLOW_AVX2 static reg set1(double v) { return _mm256_set1_pd(v); }
  DYADFLOW_AVX2 static reg fmadd(reg a, reg b, reg c) { return _mm256_fmadd_pd(a, b, c); }
  DYADFLOW_AVX2 static double hsum(reg v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d high64 = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, high64));
  }
};

// Register-blocked strip: 4 vectors of output columns held across the whole
// reduction, so C is touched once per strip.
template <typename T>
DYADFLOW_AVX2 void gemm_nn_impl(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
                                bool accumulate) {
  using V = Vec<T>;
  constexpr std::size_t w = V::width;
  constexpr std::size_t strip = 4 * w;
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    std::size_t j = 0;
    for (; j + strip <= n; j += strip) {
      auto c0 = accumulate ? V::load(crow + j) : V::zero();
      auto c1 = accumulate ? V::load(crow + j + w) : V::zero();
      auto c2 = accumulate ? V::load(crow + j + 2 * w) : V::zero();
      auto c3 = accumulate ? V::load(crow + j + 3 * w) : V::zero();
      for (std::size_t p = 0; p < k; ++p) {
        const auto av = V::set1(arow[p]);
        const T* brow = b + p * n + j;
        c0 = V::fmadd(av, V::load(brow), c0);
        c1 = V::fmadd(av, V::load(brow + w), c1);
        c2 = V::fmadd(av, V::load(brow + 2 * w), c2);
        c3 = V::fmadd(av, V::load(brow + 3 * w), c3);
      }
      V::store(crow + j, c0);
      V::store(crow + j + w, c1);
      V::store(crow + j + 2 * w, c2);
      V::store(crow + j + 3 * w, c3);
    }
    for (; j + w <= n; j += w) {
      auto c0 = accumulate ? V::load(crow + j) : V::zero();
      for (std::size_t p = 0; p < k; ++p) c0 = V::fmadd(V::set1(arow[p]), V::load(b + p * n + j), c0);
      V::store(crow + j, c0);
    }
    for (; j < n; ++j) {
      T s = accumulate ? crow[j] : T{0};
      for (std::size_t p = 0; p < k; ++p) s = __builtin_fma(arow[p], b[p * n + j], s);
      crow[j] = s;
    }
  }
}

template <typename T>
DYADFLOW_AVX2 T dot_impl(const T* x, const T* y, std::size_t n) {
  using V = Vec<T>;
  constexpr std::size_t w = V::width;
  auto s0 = V::zero();
  auto s1 = V::zero();
  std::size_t i = 0;
  for (; i + 2 * w <= n; i += 2 * w) {
    s0 = V::fmadd(V::load(x + i), V::load(y + i), s0);
    s1 = V::fmadd(V::load(x + i + w), V::load(y + i + w), s1);
  }
  for (; i + w <= n; i += w) s0 = V::fmadd(V::load(x + i), V::load(y + i), s0);
  T s = V::hsum(s0) + V::hsum(s1);
  for (; i < n; ++i) s = __builtin_fma(x[i], y[i], s);
  return s;
}

template <typename T>
DYADFLOW_AVX2 void gemm_nt_impl(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
                                bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T v = dot_impl(arow, b + j * k, k);
      crow[j] = accumulate ? crow[j] + v : v;
    }
  }
}

template <typename T>
DYADFLOW_AVX2 void gemm_tn_impl(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
                                bool accumulate) {
  using V = Vec<T>;
  constexpr std::size_t w = V::width;
  constexpr std::size_t strip = 4 * w;
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    std::size_t j = 0;
    for (; j + strip <= n; j += strip) {
      auto c0 = accumulate ? V::load(crow + j) : V::zero();
      auto c1 = accumulate ? V::load(crow + j + w) : V::zero();
      auto c2 = accumulate ? V::load(crow + j + 2 * w) : V::zero();
      auto c3 = accumulate ? V::load(crow + j + 3 * w) : V::zero();
      for (std::size_t p = 0; p < k; ++p) {
        const auto av = V::set1(a[p * m + i]);
        const T* brow = b + p * n + j;
        c0 = V::fmadd(av, V::load(brow), c0);
        c1 = V::fmadd(av, V::load(brow + w), c1);
        c2 = V::fmadd(av, V::load(brow + 2 * w), c2);
        c3 = V::fmadd(av, V::load(brow + 3 * w), c3);
      }
      V::store(crow + j, c0);
      V::store(crow + j + w, c1);
      V::store(crow + j + 2 * w, c2);
      V::store(crow + j + 3 * w, c3);
    }
    for (; j + w <= n; j += w) {
      auto c0 = accumulate ? V::load(crow + j) : V::zero();
      for (std::size_t p = 0; p < k; ++p) c0 = V::fmadd(V::set1(a[p * m + i]), V::load(b + p * n + j), c0);
      V::store(crow + j, c0);
    }
    for (; j < n; ++j) {
      T s = accumulate ? crow[j] : T{0};
      for (std::size_t p = 0; p < k; ++p) s = __builtin_fma(a[p * m + i], b[p * n + j], s);
      crow[j] = s;
    }
  }
}

template <typename T>
DYADFLOW_AVX2 void axpy_impl(T alpha, const T* x, T* y, std::size_t n) {
  using V = Vec<T>;
  constexpr std::size_t w = V::width;
  const auto av = V::set1(alpha);
  std::size_t i = 0;
  for (; i + w <= n; i += w) V::store(y + i, V::fmadd(av, V::load(x + i), V::load(y + i)));
  for (; i < n; ++i) y[i] = __builtin_fma(alpha, x[i], y[i]);
}

}  // namespace

void gemm_nn(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n, bool acc) {
  gemm_nn_impl(a, b, c, m, k, n, acc);
}
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n, bool acc) {
  gemm_nn_impl(a, b, c, m, k, n, acc);
}
void gemm_nt(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n, bool acc) {
  gemm_nt_impl(a, b, c, m, k, n, acc);
}
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n, bool acc) {
  gemm_nt_impl(a, b, c, m, k, n, acc);
}
void gemm_tn(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n, bool acc) {
  gemm_tn_impl(a, b, c, m, k, n, acc);
}
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n, bool acc) {
  gemm_tn_impl(a, b, c, m, k, n, acc);
}
float dot(const float* x, const float* y, std::size_t n) { return dot_impl(x, y, n); }
double dot(const double* x, const double* y, std::size_t n) { return dot_impl(x, y, n); }
void axpy(float alpha, const float* x, float* y, std::size_t n) { axpy_impl(alpha, x, y, n); }
void axpy(double alpha, const double* x, double* y, std::size_t n) { axpy_impl(alpha, x, y, n); }

#else  // non-x86 builds: the dispatcher never selects these

[[noreturn]] static void unavailable() { throw std::logic_error("avx2 kernels not compiled for this target"); }
void gemm_nn(const float*, const float*, float*, std::size_t, std::size_t, std::size_t, bool) { unavailable(); }
void gemm_nn(const double*, const double*, double*, std::size_t, std::size_t, std::size_t, bool) { unavailable(); }
void gemm_nt(const float*, const float*, float*, std::size_t, std::size_t, std::size_t, bool) { unavailable(); }
void gemm_nt(const double*, const double*, double*, std::size_t, std::size_t, std::size_t, bool) { unavailable(); }
void gemm_tn(const float*, const float*, float*, std::size_t, std::size_t, std::size_t, bool) { unavailable(); }
void gemm_tn(const double*, const double*, double*, std::size_t, std::size_t, std::size_t, bool) { unavailable(); }
float dot(const float*, const float*, std::size_t) { unavailable(); }
double dot(const double*, const double*, std::size_t) { unavailable(); }
void axpy(float, const float*, float*, std::size_t) { unavailable(); }
void axpy(double, const double*, double*, std::size_t) { unavailable(); }

#endif

}  // namespace dyadflow::kernels::avx2
