#include "lagdiff/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace lagdiff {

double grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x, double eps) {
  if (eps <= 0.0) throw InputError("grad_check: eps must be positive");

  Tensor probe = x.clone();
  probe.set_requires_grad(true);
  Tensor loss = fn(probe);
  if (loss.size() != 1) throw ContractError("grad_check: fn must return a scalar");
  backward(loss);
  Tensor analytic = probe.grad_as_tensor();

  double worst = 0.0;
  for (int64_t i = 0; i < x.size(); ++i) {
    Tensor xp = x.clone();
    xp.data()[i] += eps;
    double fp = fn(xp).item();
    Tensor xm = x.clone();
    xm.data()[i] -= eps;
    double fm = fn(xm).item();
    double numeric = (fp - fm) / (2.0 * eps);
    double a = analytic.data()[i];
    double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-12});
    worst = std::max(worst, std::fabs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace lagdiff
