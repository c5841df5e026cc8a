#pragma once

#include <cstdint>
#include <vector>

#include "lagdiff/tensor.hpp"

namespace lagdiff {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction over a fixed parameter list. Moment buffers are
// allocated at construction and match parameter shapes for the lifetime of
// the optimizer.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg = {});

  // One update from the parameters' accumulated grads (missing grad = zero).
  void step();
  void zero_grad();

  int64_t step_count() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamConfig cfg_;
  int64_t t_ = 0;
};

}  // namespace lagdiff
