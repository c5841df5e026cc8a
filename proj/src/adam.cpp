#include "lagdiff/adam.hpp"

#include <cmath>

#include "lagdiff/kernels.hpp"

namespace lagdiff {

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  if (cfg_.lr <= 0.0) throw InputError("adam: lr must be positive");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(size_t(p.size()), 0.0);
    v_.emplace_back(size_t(p.size()), 0.0);
  }
}

void Adam::step() {
  ++t_;
  double bias1 = 1.0 - std::pow(cfg_.beta1, double(t_));
  double bias2 = 1.0 - std::pow(cfg_.beta2, double(t_));
  static const std::vector<double> kEmpty;
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (int64_t(m_[i].size()) != p.size())
      throw DimensionError("adam: parameter " + std::to_string(i) + " changed shape");
    const double* g = p.grad_data();
    std::vector<double> zeros;
    if (!g) {
      zeros.assign(size_t(p.size()), 0.0);
      g = zeros.data();
    }
    kernels::active().adam_update(p.data(), m_[i].data(), v_[i].data(), g, p.size(), cfg_.lr,
                                  cfg_.beta1, cfg_.beta2, cfg_.eps, bias1, bias2);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace lagdiff
