#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "ccmr/tensor.hpp"

namespace ccmr {

/// One value in the reverse-mode graph. Leaves are parameters or inputs;
/// interior nodes carry a backward closure that pushes `grad` to `parents`.
template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  MatrixX<Scalar>& grad_mat() {
    if (grad.empty()) grad = Tensor<Scalar>::zeros_like(value);
    return grad.mat();
  }
  bool parent_needs_grad(std::size_t i) const { return parents[i]->requires_grad; }
  MatrixX<Scalar>& parent_grad(std::size_t i) { return parents[i]->grad_mat(); }
  const Tensor<Scalar>& parent_value(std::size_t i) const { return parents[i]->value; }
};

/// Shared handle to a graph node. Copies alias the same node.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<Scalar> value, bool requires_grad = false) : node_(std::make_shared<Node<Scalar>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<Scalar>> node) : node_(std::move(node)) {}

  const Tensor<Scalar>& value() const { return node_->value; }
  Tensor<Scalar>& mutable_value() { return node_->value; }
  const Tensor<Scalar>& grad() const { return node_->grad; }
  Tensor<Scalar>& mutable_grad() { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void zero_grad() { node_->grad = Tensor<Scalar>(); }

  int channels() const { return node_->value.channels(); }
  int height() const { return node_->value.height(); }
  int width() const { return node_->value.width(); }

  Node<Scalar>* node() const { return node_.get(); }
  const std::shared_ptr<Node<Scalar>>& shared() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node<Scalar>> node_;
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Wraps `value` as the output of an operation. The backward closure is only
/// kept when recording is on and some parent requires a gradient.
template <typename Scalar>
Var<Scalar> record(Tensor<Scalar> value, std::vector<Var<Scalar>> parents,
                   std::function<void(Node<Scalar>&)> backward) {
  Var<Scalar> out(std::move(value));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  Node<Scalar>& node = *out.node();
  node.requires_grad = true;
  node.parents.reserve(parents.size());
  for (auto& p : parents) node.parents.push_back(p.shared());
  node.backward = std::move(backward);
  return out;
}

/// Reverse sweep from `root`, seeding with `seed` (ones when omitted).
/// Gradients accumulate into every reachable node that requires them.
template <typename Scalar>
void backward(const Var<Scalar>& root, const Tensor<Scalar>* seed = nullptr) {
  if (!root.requires_grad()) return;
  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> visited;
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<Scalar>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  Node<Scalar>* top = root.node();
  if (seed) {
    require_same_shape(*seed, top->value, "backward seed");
    top->grad_mat() += seed->mat();
  } else {
    top->grad_mat().array() += Scalar(1);
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

}  // namespace ccmr
