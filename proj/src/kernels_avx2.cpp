#include "lagdiff/kernels.hpp"

// AVX2 backend. Mirrors the scalar reference's accumulation orders exactly:
// per-output-element sums run over the same indices in the same order, the
// 4-lane reductions combine as (a0+a2)+(a1+a3), and multiplies round before
// adds (no FMA). See kernels.hpp for the contract.

#if defined(__x86_64__) || defined(_M_X64)
#define LAGDIFF_X86 1
#else
#define LAGDIFF_X86 0
#endif

#if LAGDIFF_X86 && defined(__AVX2__)

#include <immintrin.h>

#include <cmath>

namespace lagdiff::kernels {
namespace {

// (a0+a2) + (a1+a3): extract gives (a0,a1) and (a2,a3); the 128-bit add pairs
// lanes 0/2 and 1/3, hadd sums the pair.
inline double hsum_pairwise(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  __m128d s = _mm_add_pd(lo, hi);
  __m128d h = _mm_hadd_pd(s, s);
  return _mm_cvtsd_f64(h);
}

void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
  int n4 = n - (n % 4);
  for (int i = 0; i < m; ++i) {
    const double* arow = a + int64_t(i) * k;
    double* crow = c + int64_t(i) * n;
    for (int j = 0; j < n4; j += 4) {
      __m256d accv = acc ? _mm256_loadu_pd(crow + j) : _mm256_setzero_pd();
      for (int kk = 0; kk < k; ++kk) {
        __m256d av = _mm256_set1_pd(arow[kk]);
        __m256d bv = _mm256_loadu_pd(b + int64_t(kk) * n + j);
        accv = _mm256_add_pd(accv, _mm256_mul_pd(av, bv));
      }
      _mm256_storeu_pd(crow + j, accv);
    }
    for (int j = n4; j < n; ++j) {
      double s = acc ? crow[j] : 0.0;
      for (int kk = 0; kk < k; ++kk) s += arow[kk] * b[int64_t(kk) * n + j];
      crow[j] = s;
    }
  }
}

inline double dot_avx(const double* a, const double* b, int64_t n) {
  int64_t n4 = n - (n % 4);
  __m256d accv = _mm256_setzero_pd();
  for (int64_t i = 0; i < n4; i += 4) {
    __m256d av = _mm256_loadu_pd(a + i);
    __m256d bv = _mm256_loadu_pd(b + i);
    accv = _mm256_add_pd(accv, _mm256_mul_pd(av, bv));
  }
  double s = hsum_pairwise(accv);
  for (int64_t i = n4; i < n; ++i) s += a[i] * b[i];
  return s;
}

void gemm_nt(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + int64_t(i) * k;
    double* crow = c + int64_t(i) * n;
    for (int j = 0; j < n; ++j) {
      double d = dot_avx(arow, b + int64_t(j) * k, k);
      crow[j] = acc ? crow[j] + d : d;
    }
  }
}

void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
  if (!acc) {
    for (int64_t i = 0; i < int64_t(k) * n; ++i) c[i] = 0.0;
  }
  int n4 = n - (n % 4);
  for (int i = 0; i < m; ++i) {
    const double* arow = a + int64_t(i) * k;
    const double* brow = b + int64_t(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      __m256d av = _mm256_set1_pd(arow[kk]);
      double* crow = c + int64_t(kk) * n;
      for (int j = 0; j < n4; j += 4) {
        __m256d cv = _mm256_loadu_pd(crow + j);
        __m256d bv = _mm256_loadu_pd(brow + j);
        _mm256_storeu_pd(crow + j, _mm256_add_pd(cv, _mm256_mul_pd(av, bv)));
      }
      for (int j = n4; j < n; ++j) crow[j] += arow[kk] * brow[j];
    }
  }
}

void ew_add(const double* a, const double* b, double* out, int64_t n) {
  int64_t n4 = n - (n % 4);
  for (int64_t i = 0; i < n4; i += 4)
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (int64_t i = n4; i < n; ++i) out[i] = a[i] + b[i];
}
void ew_sub(const double* a, const double* b, double* out, int64_t n) {
  int64_t n4 = n - (n % 4);
  for (int64_t i = 0; i < n4; i += 4)
    _mm256_storeu_pd(out + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (int64_t i = n4; i < n; ++i) out[i] = a[i] - b[i];
}
void ew_mul(const double* a, const double* b, double* out, int64_t n) {
  int64_t n4 = n - (n % 4);
  for (int64_t i = 0; i < n4; i += 4)
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (int64_t i = n4; i < n; ++i) out[i] = a[i] * b[i];
}
void axpy(double alpha, const double* x, double* y, int64_t n) {
  __m256d av = _mm256_set1_pd(alpha);
  int64_t n4 = n - (n % 4);
  for (int64_t i = 0; i < n4; i += 4) {
    __m256d yv = _mm256_loadu_pd(y + i);
    __m256d xv = _mm256_loadu_pd(x + i);
    _mm256_storeu_pd(y + i, _mm256_add_pd(yv, _mm256_mul_pd(av, xv)));
  }
  for (int64_t i = n4; i < n; ++i) y[i] += alpha * x[i];
}
void scale(const double* x, double alpha, double* out, int64_t n) {
  __m256d av = _mm256_set1_pd(alpha);
  int64_t n4 = n - (n % 4);
  for (int64_t i = 0; i < n4; i += 4)
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(x + i), av));
  for (int64_t i = n4; i < n; ++i) out[i] = x[i] * alpha;
}

double sum(const double* x, int64_t n) {
  int64_t n4 = n - (n % 4);
  __m256d accv = _mm256_setzero_pd();
  for (int64_t i = 0; i < n4; i += 4) accv = _mm256_add_pd(accv, _mm256_loadu_pd(x + i));
  double s = hsum_pairwise(accv);
  for (int64_t i = n4; i < n; ++i) s += x[i];
  return s;
}

double dot(const double* a, const double* b, int64_t n) { return dot_avx(a, b, n); }

void adam_update(double* p, double* m, double* v, const double* g, int64_t n,
                 double lr, double beta1, double beta2, double eps,
                 double bias1, double bias2) {
  __m256d b1 = _mm256_set1_pd(beta1);
  __m256d b2 = _mm256_set1_pd(beta2);
  __m256d omb1 = _mm256_set1_pd(1.0 - beta1);
  __m256d omb2 = _mm256_set1_pd(1.0 - beta2);
  __m256d lrv = _mm256_set1_pd(lr);
  __m256d epsv = _mm256_set1_pd(eps);
  __m256d ib1 = _mm256_set1_pd(bias1);
  __m256d ib2 = _mm256_set1_pd(bias2);
  int64_t n4 = n - (n % 4);
  for (int64_t i = 0; i < n4; i += 4) {
    __m256d gi = _mm256_loadu_pd(g + i);
    __m256d mi = _mm256_add_pd(_mm256_mul_pd(b1, _mm256_loadu_pd(m + i)), _mm256_mul_pd(omb1, gi));
    __m256d vi = _mm256_add_pd(_mm256_mul_pd(b2, _mm256_loadu_pd(v + i)),
                               _mm256_mul_pd(omb2, _mm256_mul_pd(gi, gi)));
    _mm256_storeu_pd(m + i, mi);
    _mm256_storeu_pd(v + i, vi);
    __m256d mhat = _mm256_div_pd(mi, ib1);
    __m256d vhat = _mm256_div_pd(vi, ib2);
    __m256d denom = _mm256_add_pd(_mm256_sqrt_pd(vhat), epsv);
    __m256d pd = _mm256_loadu_pd(p + i);
    _mm256_storeu_pd(p + i, _mm256_sub_pd(pd, _mm256_mul_pd(lrv, _mm256_div_pd(mhat, denom))));
  }
  double somb1 = 1.0 - beta1;
  double somb2 = 1.0 - beta2;
  for (int64_t i = n4; i < n; ++i) {
    double gi = g[i];
    double mi = beta1 * m[i] + somb1 * gi;
    double vi = beta2 * v[i] + somb2 * (gi * gi);
    m[i] = mi;
    v[i] = vi;
    p[i] = p[i] - lr * ((mi / bias1) / (std::sqrt(vi / bias2) + eps));
  }
}

}  // namespace

const Backend* avx2_backend() {
  if (!__builtin_cpu_supports("avx2")) return nullptr;
  static const Backend b{
      "avx2", gemm_nn, gemm_nt, gemm_tn, ew_add, ew_sub, ew_mul,
      axpy,   scale,   sum,     dot,     adam_update,
  };
  return &b;
}

}  // namespace lagdiff::kernels

#else

namespace lagdiff::kernels {
const Backend* avx2_backend() { return nullptr; }
}  // namespace lagdiff::kernels

#endif
