#include "lagdiff/tensor.hpp"

#include <cmath>
#include <unordered_set>

namespace lagdiff {

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

static std::shared_ptr<detail::TensorImpl> make_impl(std::vector<int> shape) {
  for (int d : shape) {
    if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data.assign(size_t(shape_numel(impl->shape)), 0.0);
  return impl;
}

Tensor Tensor::zeros(std::vector<int> shape) { return wrap(make_impl(std::move(shape))); }

Tensor Tensor::full(std::vector<int> shape, double value) {
  Tensor t = zeros(std::move(shape));
  for (auto& v : t.vec()) v = value;
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data) {
  if (shape_numel(shape) != int64_t(data.size()))
    throw DimensionError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return wrap(impl);
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev, double mean) {
  Tensor t = zeros(std::move(shape));
  for (auto& v : t.vec()) v = mean + stddev * rng.normal();
  return t;
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
  return impl_->data[0];
}

Tensor Tensor::grad_as_tensor() const {
  Tensor g = zeros(impl_->shape);
  if (!impl_->grad.empty()) g.vec() = impl_->grad;
  return g;
}

Tensor Tensor::clone() const {
  return from_data(impl_->shape, impl_->data);
}

bool Tensor::all_finite() const {
  for (double v : impl_->data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

uint64_t Tensor::content_hash() const {
  uint64_t h = fnv1a(impl_->data.data(), impl_->data.size() * sizeof(double));
  return fnv1a(impl_->shape.data(), impl_->shape.size() * sizeof(int), h);
}

void backward(const Tensor& loss) {
  if (loss.size() != 1) throw ContractError("backward() expects a scalar loss, got " + shape_str(loss.shape()));
  auto root = loss.impl();
  if (!root->node && !root->requires_grad) return;  // constant loss: nothing reachable

  // Post-order DFS; reversed it yields a topological order with every node
  // processed after all of its consumers.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> seen;
  struct Frame {
    detail::TensorImpl* t;
    size_t next_child = 0;
  };
  std::vector<Frame> stack;
  if (seen.insert(root.get()).second) stack.push_back({root.get()});
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (!f.t->node || f.next_child >= f.t->node->inputs.size()) {
      order.push_back(f.t);
      stack.pop_back();
      continue;
    }
    detail::TensorImpl* child = f.t->node->inputs[f.next_child++].get();
    if (seen.insert(child).second) stack.push_back({child});
  }

  root->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* t = *it;
    if (!t->node) continue;
    if (t->grad.empty()) continue;  // no gradient flowed here
    t->node->backprop(t->grad.data());
  }
}

}  // namespace lagdiff
