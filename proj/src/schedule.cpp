#include "lagdiff/schedule.hpp"

#include <cmath>

#include "lagdiff/ops.hpp"

namespace lagdiff {

NoiseSchedule NoiseSchedule::linear(int T, double beta_start, double beta_end) {
  if (T < 2) throw InputError("make_schedule: T must be >= 2");
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(size_t(T));
  s.alpha.resize(size_t(T));
  s.alpha_bar.resize(size_t(T));
  double prod = 1.0;
  for (int t = 0; t < T; ++t) {
    double b = beta_start + (beta_end - beta_start) * double(t) / double(T - 1);
    s.beta[size_t(t)] = b;
    s.alpha[size_t(t)] = 1.0 - b;
    prod *= 1.0 - b;
    s.alpha_bar[size_t(t)] = prod;
  }
  return s;
}

Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& s) {
  if (t < 0 || t >= s.T) throw InputError("q_sample: t out of range");
  if (!z0.same_shape(eps))
    throw DimensionError("q_sample: eps shape " + shape_str(eps.shape()) + " vs z0 " +
                         shape_str(z0.shape()));
  double ab = s.alpha_bar[size_t(t)];
  return ops::add(ops::scale(z0, std::sqrt(ab)), ops::scale(eps, std::sqrt(1.0 - ab)));
}

}  // namespace lagdiff
