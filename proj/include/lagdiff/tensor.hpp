#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "lagdiff/errors.hpp"
#include "lagdiff/rng.hpp"

namespace lagdiff {

class Tensor;

namespace detail {

struct TensorImpl;

// One recorded op. Inputs are held via shared_ptr so the graph keeps its
// operands alive; backprop accumulates into the inputs' grad buffers.
struct Node {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const double* grad_out)> backprop;
};

struct TensorImpl {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> node;

  int64_t size() const { return int64_t(data.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

// Dense row-major f64 tensor with optional reverse-mode graph linkage.
// Ops record a node only when an input is traced (requires_grad or already
// part of a graph), so inference-path tensors carry zero autodiff overhead.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double value);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data);
  static Tensor scalar(double value);
  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0, double mean = 0.0);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int rank() const { return int(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[size_t(i)]; }
  int64_t size() const { return impl_->size(); }

  double* data() { return impl_->data.data(); }
  const double* data() const { return impl_->data.data(); }
  std::vector<double>& vec() { return impl_->data; }
  const std::vector<double>& vec() const { return impl_->data; }

  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  double* grad_data() { return impl_->grad.empty() ? nullptr : impl_->grad.data(); }
  const double* grad_data() const { return impl_->grad.empty() ? nullptr : impl_->grad.data(); }
  Tensor grad_as_tensor() const;  // zeros when no grad was accumulated
  void zero_grad() {
    if (!impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  }

  // Deep copy of data; drops graph linkage and grad.
  Tensor clone() const;

  bool same_shape(const Tensor& other) const { return impl_->shape == other.impl_->shape; }
  bool all_finite() const;
  uint64_t content_hash() const;

  std::shared_ptr<detail::Node> node() const { return impl_->node; }
  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

  static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Reverse-mode sweep from a scalar loss. Populates grad buffers of every
// traced tensor reachable from the loss; leaves everything else untouched.
void backward(const Tensor& loss);

std::string shape_str(const std::vector<int>& shape);
int64_t shape_numel(const std::vector<int>& shape);

}  // namespace lagdiff
