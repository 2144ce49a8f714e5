#include "vsdf/nn/autograd.hpp"

#include <sstream>
#include <unordered_set>

namespace vsdf::nn {
namespace {
thread_local bool g_grad_enabled = true;
}

std::string shape_to_string(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ')';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
void backward(const Var<T>& root, const Tensor<T>* seed) {
  if (!root.requires_grad()) return;
  Node<T>* r = root.node();
  if (seed != nullptr) {
    if (seed->shape != r->value.shape) throw std::invalid_argument("backward seed shape mismatch");
    r->grad = *seed;
  } else {
    if (r->value.numel() != 1) throw std::invalid_argument("backward on non-scalar needs a seed");
    r->grad = Tensor<T>(r->value.shape, T{1});
  }

  // Post-order DFS; reversed it is a valid reverse-topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{r, 0}};
  visited.insert(r);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn();
    if (!n->is_leaf) {
      // Interior gradients and closures are dead after this point.
      n->grad = Tensor<T>();
      n->backward_fn = nullptr;
    }
  }
}

template void backward<float>(const Var<float>&, const Tensor<float>*);
template void backward<double>(const Var<double>&, const Tensor<double>*);

}  // namespace vsdf::nn
