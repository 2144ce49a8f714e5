#pragma once
// Reverse-mode autodiff over a dynamically built graph: every op result owns a closure that pushes
// its gradient into its inputs; backward() visits the graph in reverse
// topological order.

#include <functional>
#include <memory>
#include <vector>

#include "vsdf/nn/tensor.hpp"

namespace vsdf::nn {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward_fn;

  Tensor<T>& grad_buffer() {
    if (grad.data.size() != value.data.size()) grad = Tensor<T>(value.shape);
    return grad;
  }
  bool has_grad() const { return !grad.data.empty(); }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  int dim(int i) const { return node_->value.dim(i); }
  std::size_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }
  // Gradient accumulated by backward(); empty if none reached this node.
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->grad; }
  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Graph recording is on by default and can be disabled per thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
Var<T> constant(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  return Var<T>(std::move(n));
}

template <typename T>
Var<T> parameter(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var<T>(std::move(n));
}

namespace detail {

// Creates the result node of an op. The node only links to its inputs when
// gradients are being recorded and at least one input needs them.
template <typename T>
Var<T> make_result(Tensor<T> value, std::initializer_list<const Var<T>*> inputs) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->is_leaf = false;
  if (grad_enabled()) {
    for (const Var<T>* in : inputs) {
      if (in != nullptr && in->requires_grad()) n->requires_grad = true;
    }
    if (n->requires_grad) {
      for (const Var<T>* in : inputs) {
        if (in != nullptr && in->defined()) n->parents.push_back(in->shared());
      }
    }
  }
  return Var<T>(std::move(n));
}

}  // namespace detail

// Runs reverse accumulation from `root`. A scalar root is seeded with 1;
// otherwise `seed` must match its shape.
template <typename T>
void backward(const Var<T>& root, const Tensor<T>* seed = nullptr);

}  // namespace vsdf::nn
