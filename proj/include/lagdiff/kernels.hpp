#pragma once

#include <cstdint>

namespace lagdiff::kernels {

// Dense f64 kernels behind a runtime-selected backend.
//
// Every kernel pins its accumulation order so all backends agree bitwise:
//   - gemm_nn and gemm_tn accumulate along the contraction index in ascending
//     order per output element (vectorization runs across independent output
//     columns and cannot reorder a single accumulator).
//   - gemm_nt, dot and sum use four independent accumulators over index % 4,
//     combined as (a0+a2) + (a1+a3), then a sequential tail.
//   - No fused multiply-add anywhere: each product rounds before the add.
// The equivalence tests compare scalar and AVX2 outputs with memcmp.
struct Backend {
  const char* name;

  // c[m,n] (+)= a[m,k] * b[k,n]
  void (*gemm_nn)(const double* a, const double* b, double* c, int m, int k, int n, bool acc);
  // c[m,n] (+)= a[m,k] * b[n,k]^T   (rows of a dotted with rows of b)
  void (*gemm_nt)(const double* a, const double* b, double* c, int m, int k, int n, bool acc);
  // c[k,n] (+)= a[m,k]^T * b[m,n]
  void (*gemm_tn)(const double* a, const double* b, double* c, int m, int k, int n, bool acc);

  void (*ew_add)(const double* a, const double* b, double* out, int64_t n);
  void (*ew_sub)(const double* a, const double* b, double* out, int64_t n);
  void (*ew_mul)(const double* a, const double* b, double* out, int64_t n);
  void (*axpy)(double alpha, const double* x, double* y, int64_t n);  // y += alpha*x
  void (*scale)(const double* x, double alpha, double* out, int64_t n);

  double (*sum)(const double* x, int64_t n);
  double (*dot)(const double* a, const double* b, int64_t n);

  // In-place Adam update with precomputed bias corrections
  // bias1 = 1 - beta1^t, bias2 = 1 - beta2^t.
  void (*adam_update)(double* p, double* m, double* v, const double* g, int64_t n,
                      double lr, double beta1, double beta2, double eps,
                      double bias1, double bias2);
};

const Backend& scalar_backend();

// Null when the CPU lacks AVX2 (or the build target is not x86-64).
const Backend* avx2_backend();

// Selected once per process. LAGDIFF_KERNELS=scalar|avx2|auto (default auto:
// AVX2 when available, scalar otherwise). Requesting avx2 on an unsupported
// CPU throws ConfigError.
const Backend& active();

}  // namespace lagdiff::kernels
