#pragma once

#include <functional>

#include "lagdiff/tensor.hpp"

namespace lagdiff {

// Max over elements of |analytic - central difference| / max(|analytic|,
// |numeric|, 1e-12), where the analytic gradient comes from backward() and
// the numeric one from (f(x+eps e_i) - f(x-eps e_i)) / (2 eps). fn must be a
// deterministic map to a scalar tensor.
double grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x, double eps);

}  // namespace lagdiff
