#include <cmath>
#include <cstring>

#include "doctest.h"
#include "lagdiff/adam.hpp"
#include "lagdiff/grad_check.hpp"
#include "lagdiff/ops.hpp"
#include "lagdiff/tensor.hpp"

using namespace lagdiff;
namespace op = lagdiff::ops;

namespace {

Tensor randn(std::vector<int> shape, uint64_t seed) {
  Rng rng(seed);
  return Tensor::randn(std::move(shape), rng);
}

}  // namespace

TEST_CASE("matmul basics") {
  Tensor id = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor r = op::matmul(id, a);
  CHECK(r.vec() == std::vector<double>{1, 2, 3, 4});

  Tensor proj = Tensor::from_data({2, 2}, {1, 0, 0, 0});
  Tensor v = Tensor::from_data({2, 1}, {5, 7});
  Tensor p = op::matmul(proj, v);
  CHECK(p.vec() == std::vector<double>{5, 0});

  CHECK_THROWS_AS(op::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST_CASE("matmul gradient equals row-sums of b, verified by finite differences") {
  Tensor a = randn({3, 4}, 11);
  Tensor b = randn({4, 5}, 12);

  double err = grad_check([&](const Tensor& x) { return op::sum_all(op::matmul(x, b)); }, a, 1e-5);
  CHECK(err < 1e-6);

  // d/da_ij sum(a b) = sum_n b_jn, broadcast over rows of a.
  Tensor probe = a.clone();
  probe.set_requires_grad(true);
  backward(op::sum_all(op::matmul(probe, b)));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) {
      double want = 0.0;
      for (int n = 0; n < 5; ++n) want += b.data()[j * 5 + n];
      CHECK(probe.grad_data()[i * 4 + j] == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("conv1x1 identity and channel-sum cases") {
  // W = identity over channels: output equals input.
  Tensor w = Tensor::from_data({2, 2, 1}, {1, 0, 0, 1});
  Tensor x = randn({2, 3, 3}, 5);
  Tensor y = op::conv1x1(x, w);
  CHECK(std::memcmp(y.data(), x.data(), size_t(x.size()) * sizeof(double)) == 0);

  Tensor w2 = Tensor::from_data({2, 2, 1}, {1, 1, 0, 0});
  Tensor x2 = Tensor::from_data({2, 1, 1}, {3, 4});
  Tensor y2 = op::conv1x1(x2, w2);
  CHECK(y2.vec() == std::vector<double>{7, 0});

  CHECK_THROWS_AS(op::conv1x1(Tensor::zeros({3, 2, 2}), Tensor::zeros({4, 2, 1})), DimensionError);
}

TEST_CASE("conv1x1 equals per-pixel matmul on random input") {
  Tensor x = randn({3, 4, 4}, 31);
  Tensor w = randn({5, 3, 1}, 32);
  Tensor y = op::conv1x1(x, w);
  // Independent enumeration: out[co][p] = sum_ci w[co][ci] x[ci][p].
  for (int co = 0; co < 5; ++co)
    for (int p = 0; p < 16; ++p) {
      double want = 0.0;
      for (int ci = 0; ci < 3; ++ci) want += w.data()[co * 3 + ci] * x.data()[ci * 16 + p];
      CHECK(std::fabs(y.data()[co * 16 + p] - want) < 1e-12);
    }
}

TEST_CASE("softmax closed forms and stability") {
  Tensor a = op::softmax_rows(Tensor::from_data({1, 2}, {0, 0}));
  CHECK(a.data()[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(a.data()[1] == doctest::Approx(0.5).epsilon(1e-15));

  Tensor b = op::softmax_rows(Tensor::from_data({1, 2}, {0.0, std::log(3.0)}));
  CHECK(b.data()[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(b.data()[1] == doctest::Approx(0.75).epsilon(1e-12));

  Tensor c = op::softmax_rows(Tensor::from_data({1, 2}, {1000.0, 1000.0}));
  CHECK(c.all_finite());
  CHECK(c.data()[0] == doctest::Approx(0.5).epsilon(1e-15));

  // Property: rows sum to 1 within 1e-12 on random inputs.
  for (uint64_t seed : {1u, 2u, 3u}) {
    Tensor x = randn({7, 13}, seed);
    Tensor y = op::softmax_rows(x);
    for (int i = 0; i < 7; ++i) {
      double s = 0.0;
      for (int j = 0; j < 13; ++j) s += y.data()[i * 13 + j];
      CHECK(std::fabs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("softmax_rows_masked zeroes pad columns and renormalizes the prefix") {
  Tensor x = randn({4, 6}, 77);
  Tensor y = op::softmax_rows_masked(x, 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(y.data()[i * 6 + 4] == 0.0);
    CHECK(y.data()[i * 6 + 5] == 0.0);
    double s = 0.0;
    for (int j = 0; j < 4; ++j) s += y.data()[i * 6 + j];
    CHECK(std::fabs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("backward closed forms") {
  // f(x) = x^2 at x = 3 has gradient 6.
  Tensor x = Tensor::scalar(3.0);
  x.set_requires_grad(true);
  Tensor loss = op::sum_all(op::mul(x, x));
  backward(loss);
  CHECK(x.grad_data()[0] == doctest::Approx(6.0).epsilon(1e-15));

  // A parameter not used by the loss keeps a zero (absent) gradient.
  Tensor unused = Tensor::scalar(1.0);
  unused.set_requires_grad(true);
  Tensor y = Tensor::scalar(2.0);
  y.set_requires_grad(true);
  backward(op::mul(y, y));
  CHECK(unused.grad_data() == nullptr);
  CHECK(unused.grad_as_tensor().data()[0] == 0.0);

  CHECK_THROWS_AS(backward(Tensor::zeros({2})), ContractError);
}

TEST_CASE("softmax composed with sum of squares matches finite differences") {
  for (uint64_t seed : {101u, 102u, 103u}) {
    Tensor x = randn({3, 5}, seed);
    double err = grad_check(
        [](const Tensor& t) {
          Tensor y = op::softmax_rows(t);
          return op::sum_all(op::mul(y, y));
        },
        x, 1e-5);
    CHECK(err < 1e-5);
  }
}

TEST_CASE("grad_check limit cases") {
  Tensor x = randn({4}, 5);
  // Linear functionals are exact under central differences.
  CHECK(grad_check([](const Tensor& t) { return op::sum_all(op::scale(t, 2.5)); }, x, 1e-4) < 1e-9);
  // Constant: analytic and numeric gradients are both zero.
  CHECK(grad_check([](const Tensor& t) { return op::sum_all(op::sub(t, t)); }, x, 1e-4) == 0.0);
  CHECK_THROWS_AS(grad_check([](const Tensor& t) { return op::sum_all(t); }, x, 0.0), InputError);
}

// Every differentiable op passes a finite-difference check on 3 seeds.
TEST_CASE("gradient sweep over the op set") {
  for (uint64_t seed : {1u, 2u, 3u}) {
    Tensor m1 = randn({3, 4}, seed);
    Tensor m2 = randn({3, 4}, seed + 10);
    Tensor k34 = randn({4, 2}, seed + 20);
    Tensor img = randn({2, 4, 4}, seed + 30);
    Tensor kern = randn({3, 2, 1}, seed + 40);
    Tensor bias = randn({4}, seed + 50);
    Tensor cbias = randn({2}, seed + 60);
    Tensor gamma = randn({4}, seed + 70);
    Tensor beta = randn({4}, seed + 80);
    Tensor vrow = randn({4}, seed + 90);
    Tensor mask = Tensor::from_data({4, 4}, {1, 0, 1, 0, 0, 1, 0, 1, 1, 1, 0, 0, 0, 0, 1, 1});

    auto fd = [&](auto fn, const Tensor& at, double tol) {
      CHECK(grad_check(fn, at, 1e-5) < tol);
    };

    fd([&](const Tensor& t) { return op::sum_all(op::mul(op::add(t, m2), op::sub(t, m2))); }, m1, 1e-6);
    fd([&](const Tensor& t) { return op::sum_all(op::matmul(t, k34)); }, m1, 1e-6);
    fd([&](const Tensor& t) { return op::mean_all(op::matmul_nt(t, m2)); }, m1, 1e-5);
    fd([&](const Tensor& t) { return op::sum_all(op::conv1x1(t, kern)); }, img, 1e-6);
    fd([&](const Tensor& t) {
      Tensor y = op::conv1x1(img, t);
      return op::sum_all(op::mul(y, y));
    }, kern, 1e-5);
    fd([&](const Tensor& t) { return op::mean_all(op::add_row_bias(m1, t)); }, bias, 1e-6);
    fd([&](const Tensor& t) { return op::mean_all(op::add_channel_bias(img, t)); }, cbias, 1e-6);
    fd([&](const Tensor& t) {
      Tensor y = op::softmax_rows_masked(t, 3);
      return op::sum_all(op::mul(y, y));
    }, m1, 1e-5);
    fd([&](const Tensor& t) {
      Tensor y = op::layer_norm(t, gamma, beta);
      return op::sum_all(op::mul(y, y));
    }, m1, 1e-4);
    fd([&](const Tensor& t) {
      Tensor y = op::layer_norm(m1, t, beta);
      return op::sum_all(op::mul(y, y));
    }, gamma, 1e-5);
    fd([&](const Tensor& t) { return op::sum_all(op::mul(op::silu(t), op::silu(t))); }, m1, 1e-5);
    fd([&](const Tensor& t) { return op::sum_all(op::mul(op::transpose2d(t), op::transpose2d(t))); }, m1, 1e-6);
    fd([&](const Tensor& t) { return op::mean_all(op::reshape(t, {4, 3})); }, m1, 1e-6);
    fd([&](const Tensor& t) {
      Tensor s = op::slice_cols(t, 1, 2);
      return op::sum_all(op::mul(s, s));
    }, m1, 1e-5);
    fd([&](const Tensor& t) {
      Tensor y = op::concat_cols(t, m2);
      return op::sum_all(op::mul(y, y));
    }, m1, 1e-5);
    fd([&](const Tensor& t) {
      Tensor y = op::gather_rows(t, {0, 2, 2, 1});
      return op::sum_all(op::mul(y, y));
    }, m1, 1e-5);
    fd([&](const Tensor& t) {
      Tensor y = op::replace_rows(m1, {1}, t);
      return op::sum_all(op::mul(y, y));
    }, vrow, 1e-5);
    fd([&](const Tensor& t) {
      Tensor y = op::replace_rows(t, {1}, vrow);
      return op::sum_all(op::mul(y, y));
    }, m1, 1e-5);
    fd([&](const Tensor& t) { return op::sum_all(op::mul(op::avg_pool2(t), op::avg_pool2(t))); }, img, 1e-5);
    fd([&](const Tensor& t) {
      Tensor y = op::upsample_nearest2(t);
      return op::sum_all(op::mul(y, y));
    }, img, 1e-5);
    fd([&](const Tensor& t) {
      Tensor y = op::blend_masked(t, img, mask);
      return op::sum_all(op::mul(y, y));
    }, img, 1e-5);
    fd([&](const Tensor& t) { return op::mse(t, m2); }, m1, 1e-5);
  }
}

TEST_CASE("adam first step and determinism") {
  // Zero gradient on a fresh state leaves parameters unchanged.
  Tensor p = Tensor::from_data({3}, {1.0, -2.0, 3.0});
  Adam opt({p}, {.lr = 1e-3});
  opt.step();  // no grad accumulated at all
  CHECK(p.vec() == std::vector<double>{1.0, -2.0, 3.0});

  // First step moves each coordinate by ~ -sign(g) * lr.
  Tensor q = Tensor::from_data({3}, {0.0, 0.0, 0.0});
  q.set_requires_grad(true);
  Tensor w = Tensor::from_data({3}, {2.0, -5.0, 0.5});
  Adam opt2({q}, {.lr = 1e-3});
  backward(op::sum_all(op::mul(q, w)));  // grad = w
  opt2.step();
  for (int i = 0; i < 3; ++i) {
    double g = w.data()[i];
    double delta = q.data()[i];
    CHECK(std::fabs(delta + (g > 0 ? 1.0 : -1.0) * 1e-3) < 1e-3 * 1e-4 + 1e-12);
    CHECK(std::fabs(delta) <= 1e-3 * (1.0 + 1e-9));
  }

  // Bitwise determinism: identical state and grads give identical updates.
  auto run = [&]() {
    Tensor r = Tensor::from_data({4}, {0.1, 0.2, 0.3, 0.4});
    r.set_requires_grad(true);
    Adam o({r}, {.lr = 3e-3});
    for (int it = 0; it < 5; ++it) {
      o.zero_grad();
      backward(op::mse(r, Tensor::from_data({4}, {1, 1, 1, 1})));
      o.step();
    }
    return r.vec();
  };
  auto a = run();
  auto b = run();
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

TEST_CASE("forward determinism") {
  Tensor x = randn({4, 4}, 9);
  Tensor y1 = op::softmax_rows(op::matmul(x, x));
  Tensor y2 = op::softmax_rows(op::matmul(x, x));
  CHECK(std::memcmp(y1.data(), y2.data(), size_t(y1.size()) * sizeof(double)) == 0);
}
