#include <array>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "lagdiff/kernels.hpp"
#include "lagdiff/rng.hpp"

using namespace lagdiff;

namespace {

std::vector<double> random_vec(size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

// The backends share pinned accumulation orders, so scalar and AVX2 results
// must match bit for bit, not just within tolerance.
TEST_CASE("scalar and avx2 backends agree bitwise") {
  const kernels::Backend* avx2 = kernels::avx2_backend();
  if (!avx2) {
    MESSAGE("AVX2 not available on this CPU; equivalence suite skipped");
    return;
  }
  const kernels::Backend& ref = kernels::scalar_backend();
  Rng rng(7);

  // Odd sizes on purpose: tails must agree too.
  std::vector<std::array<int, 3>> sizes = {{5, 7, 9}, {1, 1, 1}, {16, 32, 16}, {3, 61, 13}};
  for (auto [m, k, n] : sizes) {
    auto a = random_vec(size_t(m * k), rng);
    auto b = random_vec(size_t(k * n), rng);
    auto bt = random_vec(size_t(n * k), rng);
    auto c0 = random_vec(size_t(m * n), rng);

    for (bool acc : {false, true}) {
      auto c1 = c0, c2 = c0;
      ref.gemm_nn(a.data(), b.data(), c1.data(), m, k, n, acc);
      avx2->gemm_nn(a.data(), b.data(), c2.data(), m, k, n, acc);
      CHECK(bitwise_equal(c1, c2));

      c1 = c0;
      c2 = c0;
      ref.gemm_nt(a.data(), bt.data(), c1.data(), m, k, n, acc);
      avx2->gemm_nt(a.data(), bt.data(), c2.data(), m, k, n, acc);
      CHECK(bitwise_equal(c1, c2));

      auto d1 = random_vec(size_t(k * n), rng);
      auto d2 = d1;
      auto bmn = random_vec(size_t(m * n), rng);
      ref.gemm_tn(a.data(), bmn.data(), d1.data(), m, k, n, acc);
      avx2->gemm_tn(a.data(), bmn.data(), d2.data(), m, k, n, acc);
      CHECK(bitwise_equal(d1, d2));
    }
  }

  for (int64_t n : {1, 3, 4, 17, 1024, 1000}) {
    auto a = random_vec(size_t(n), rng);
    auto b = random_vec(size_t(n), rng);
    std::vector<double> o1(static_cast<size_t>(n));
    std::vector<double> o2(static_cast<size_t>(n));

    ref.ew_add(a.data(), b.data(), o1.data(), n);
    avx2->ew_add(a.data(), b.data(), o2.data(), n);
    CHECK(bitwise_equal(o1, o2));
    ref.ew_sub(a.data(), b.data(), o1.data(), n);
    avx2->ew_sub(a.data(), b.data(), o2.data(), n);
    CHECK(bitwise_equal(o1, o2));
    ref.ew_mul(a.data(), b.data(), o1.data(), n);
    avx2->ew_mul(a.data(), b.data(), o2.data(), n);
    CHECK(bitwise_equal(o1, o2));
    ref.scale(a.data(), 1.7, o1.data(), n);
    avx2->scale(a.data(), 1.7, o2.data(), n);
    CHECK(bitwise_equal(o1, o2));

    auto y1 = b, y2 = b;
    ref.axpy(-0.3, a.data(), y1.data(), n);
    avx2->axpy(-0.3, a.data(), y2.data(), n);
    CHECK(bitwise_equal(y1, y2));

    double s1 = ref.sum(a.data(), n);
    double s2 = avx2->sum(a.data(), n);
    CHECK(std::memcmp(&s1, &s2, sizeof(double)) == 0);
    s1 = ref.dot(a.data(), b.data(), n);
    s2 = avx2->dot(a.data(), b.data(), n);
    CHECK(std::memcmp(&s1, &s2, sizeof(double)) == 0);

    auto p1 = random_vec(size_t(n), rng);
    auto p2 = p1;
    auto m1 = random_vec(size_t(n), rng);
    auto m2 = m1;
    auto v1 = random_vec(size_t(n), rng);
    for (auto& x : v1) x = x * x;  // second moments are nonnegative
    auto v2 = v1;
    ref.adam_update(p1.data(), m1.data(), v1.data(), a.data(), n, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001);
    avx2->adam_update(p2.data(), m2.data(), v2.data(), a.data(), n, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001);
    CHECK(bitwise_equal(p1, p2));
    CHECK(bitwise_equal(m1, m2));
    CHECK(bitwise_equal(v1, v2));
  }
}

TEST_CASE("gemm_nn matches brute-force triple loop") {
  Rng rng(21);
  int m = 6, k = 11, n = 5;
  auto a = random_vec(size_t(m * k), rng);
  auto b = random_vec(size_t(k * n), rng);
  std::vector<double> want(size_t(m * n), 0.0);
  for (int i = 0; i < m; ++i)
    for (int kk = 0; kk < k; ++kk)
      for (int j = 0; j < n; ++j) want[size_t(i * n + j)] += a[size_t(i * k + kk)] * b[size_t(kk * n + j)];
  std::vector<double> got(size_t(m * n));
  kernels::active().gemm_nn(a.data(), b.data(), got.data(), m, k, n, false);
  for (size_t i = 0; i < want.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("gemm_nt/gemm_tn match transposed gemm_nn") {
  Rng rng(22);
  int m = 4, k = 9, n = 7;
  auto a = random_vec(size_t(m * k), rng);
  auto b = random_vec(size_t(n * k), rng);  // gemm_nt treats b as [n,k]
  std::vector<double> btrans(size_t(k * n));
  for (int j = 0; j < n; ++j)
    for (int kk = 0; kk < k; ++kk) btrans[size_t(kk * n + j)] = b[size_t(j * k + kk)];
  std::vector<double> want(size_t(m * n)), got(size_t(m * n));
  kernels::active().gemm_nn(a.data(), btrans.data(), want.data(), m, k, n, false);
  kernels::active().gemm_nt(a.data(), b.data(), got.data(), m, k, n, false);
  for (size_t i = 0; i < want.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));

  // c[k,n] = a^T b with a[m,k], b[m,n]
  auto bmn = random_vec(size_t(m * n), rng);
  std::vector<double> atrans(size_t(k * m));
  for (int i = 0; i < m; ++i)
    for (int kk = 0; kk < k; ++kk) atrans[size_t(kk * m + i)] = a[size_t(i * k + kk)];
  std::vector<double> want2(size_t(k * n)), got2(size_t(k * n));
  kernels::active().gemm_nn(atrans.data(), bmn.data(), want2.data(), k, m, n, false);
  kernels::active().gemm_tn(a.data(), bmn.data(), got2.data(), m, k, n, false);
  for (size_t i = 0; i < want2.size(); ++i) CHECK(got2[i] == doctest::Approx(want2[i]).epsilon(1e-12));
}

TEST_CASE("rng streams are deterministic and independent of draw history") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng c(42, 1), d(42, 2);
  CHECK(c.next_u64() != d.next_u64());

  // Forked substreams do not disturb the parent.
  Rng e(9);
  uint64_t first = Rng(9).next_u64();
  Rng sub = e.fork(3);
  (void)sub.next_u64();
  CHECK(e.next_u64() == first);
}
