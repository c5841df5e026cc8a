#include "lagdiff/kernels.hpp"

#include <cmath>

// Reference backend. The loops below define the accumulation-order contract
// documented in kernels.hpp; the AVX2 backend mirrors them lane for lane.

namespace lagdiff::kernels {
namespace {

void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
  for (int i = 0; i < m; ++i) {
    double* crow = c + int64_t(i) * n;
    if (!acc) {
      for (int j = 0; j < n; ++j) crow[j] = 0.0;
    }
    const double* arow = a + int64_t(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      double av = arow[kk];
      const double* brow = b + int64_t(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

double dot_blocked(const double* a, const double* b, int64_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  int64_t n4 = n - (n % 4);
  for (int64_t i = 0; i < n4; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  double s = (s0 + s2) + (s1 + s3);
  for (int64_t i = n4; i < n; ++i) s += a[i] * b[i];
  return s;
}

void gemm_nt(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + int64_t(i) * k;
    double* crow = c + int64_t(i) * n;
    for (int j = 0; j < n; ++j) {
      double d = dot_blocked(arow, b + int64_t(j) * k, k);
      crow[j] = acc ? crow[j] + d : d;
    }
  }
}

void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n, bool acc) {
  if (!acc) {
    for (int64_t i = 0; i < int64_t(k) * n; ++i) c[i] = 0.0;
  }
  for (int i = 0; i < m; ++i) {
    const double* arow = a + int64_t(i) * k;
    const double* brow = b + int64_t(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      double av = arow[kk];
      double* crow = c + int64_t(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void ew_add(const double* a, const double* b, double* out, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}
void ew_sub(const double* a, const double* b, double* out, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}
void ew_mul(const double* a, const double* b, double* out, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}
void axpy(double alpha, const double* x, double* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}
void scale(const double* x, double alpha, double* out, int64_t n) {
  for (int64_t i = 0; i < n; ++i) out[i] = x[i] * alpha;
}

double sum(const double* x, int64_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  int64_t n4 = n - (n % 4);
  for (int64_t i = 0; i < n4; i += 4) {
    s0 += x[i];
    s1 += x[i + 1];
    s2 += x[i + 2];
    s3 += x[i + 3];
  }
  double s = (s0 + s2) + (s1 + s3);
  for (int64_t i = n4; i < n; ++i) s += x[i];
  return s;
}

double dot(const double* a, const double* b, int64_t n) { return dot_blocked(a, b, n); }

void adam_update(double* p, double* m, double* v, const double* g, int64_t n,
                 double lr, double beta1, double beta2, double eps,
                 double bias1, double bias2) {
  double omb1 = 1.0 - beta1;
  double omb2 = 1.0 - beta2;
  for (int64_t i = 0; i < n; ++i) {
    double gi = g[i];
    double mi = beta1 * m[i] + omb1 * gi;
    double vi = beta2 * v[i] + omb2 * (gi * gi);
    m[i] = mi;
    v[i] = vi;
    double mhat = mi / bias1;
    double vhat = vi / bias2;
    p[i] = p[i] - lr * (mhat / (std::sqrt(vhat) + eps));
  }
}

}  // namespace

const Backend& scalar_backend() {
  static const Backend b{
      "scalar", gemm_nn, gemm_nt, gemm_tn, ew_add, ew_sub, ew_mul,
      axpy,     scale,   sum,     dot,     adam_update,
  };
  return b;
}

}  // namespace lagdiff::kernels
