#pragma once

#include <vector>

#include "lagdiff/tensor.hpp"

namespace lagdiff {

// Diffusion coefficients shared by training and DDIM sampling.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;       // per-step variance
  std::vector<double> alpha;      // 1 - beta
  std::vector<double> alpha_bar;  // running product, strictly decreasing

  static NoiseSchedule linear(int T, double beta_start = 1e-4, double beta_end = 0.02);
};

// sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& s);

}  // namespace lagdiff
