#pragma once

#include <atomic>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "segkd/tensor.hpp"

namespace segkd {

namespace detail {
inline std::atomic<std::uint64_t>& node_counter() {
  static std::atomic<std::uint64_t> c{0};
  return c;
}
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording for the enclosing scope (inference mode).
struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily during backward
  bool requires_grad = false;
  std::uint64_t seq = detail::node_counter()++;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& ensure_grad() {
    if (grad.shape != value.shape) grad = Tensor<T>::zeros(value.shape);
    return grad;
  }
};

/// Value-semantic handle to an autograd node. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> v, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(v);
    node_->requires_grad = requires_grad && grad_enabled();
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& value() { return node_->value; }
  Tensor<T>& grad() { return node_->ensure_grad(); }
  const Tensor<T>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

  void zero_grad() {
    if (node_) node_->ensure_grad().fill(T(0));
  }

  /// A view of the same values cut off from the graph.
  Var detach() const { return Var(node_->value, false); }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
Var<T> constant(Tensor<T> v) {
  return Var<T>(std::move(v), false);
}

template <typename T>
Var<T> parameter(Tensor<T> v) {
  return Var<T>(std::move(v), true);
}

/// Builds an op node. `backward` receives the finished node and must
/// accumulate into its parents' grads; it is dropped entirely when grad
/// recording is off or no parent needs gradients.
template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<std::shared_ptr<Node<T>>> parents,
               std::function<void(Node<T>&)> backward) {
  Var<T> out(std::move(value), false);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents)
      if (p && p->requires_grad) needs = true;
  }
  if (needs) {
    out.node()->requires_grad = true;
    out.node()->parents = std::move(parents);
    out.node()->backward_fn = std::move(backward);
  }
  return out;
}

/// Reverse-mode sweep from a scalar (or any) root. Seeds the root gradient
/// with ones and visits reachable nodes in reverse creation order, which is
/// a valid topological order for tapes built during the forward pass.
template <typename T>
void backward(const Var<T>& root) {
  if (!root.defined() || !root.node()->requires_grad) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<Node<T>*> stack{root.node().get()};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p && p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node<T>* a, const Node<T>* b) { return a->seq > b->seq; });

  root.node()->ensure_grad().fill(T(1));
  for (Node<T>* n : order) {
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

}  // namespace segkd
