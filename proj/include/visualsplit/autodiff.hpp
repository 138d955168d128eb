#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// Every differentiable operation produces a Var whose node remembers its
// inputs and a closure that pushes the output gradient back into them.
// Graphs are built eagerly and released when the last Var referencing them
// goes out of scope.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "visualsplit/tensor.hpp"

namespace vsplit::ad {

namespace detail {
inline thread_local bool grad_enabled = true;
}

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled; }

template <class T>
struct Node {
  Tensor<T> value;
  Buffer<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::span<T> grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T{0});
    return grad;
  }
  bool has_grad() const { return grad.size() == value.size() && !grad.empty(); }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  /// Direct access for optimizers and loaders; bypasses the graph.
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  const T* data() const { return node_->value.data(); }
  T item() const { return node_->value[0]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  /// Empty span when no gradient has reached this variable.
  std::span<const T> grad() const {
    if (!node_->has_grad()) return {};
    return node_->grad;
  }
  void zero_grad() const { node_->grad.clear(); }

  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <class T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

template <class T>
Var<T> parameter(Tensor<T> value) {
  return Var<T>(std::move(value), true);
}

/// Wraps an op result. `fn` runs during backward with the output node; it
/// must only accumulate into inputs that require gradients.
template <class T, class Fn>
Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Fn&& fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& in : inputs) {
        if (in.requires_grad()) node->inputs.push_back(in.shared());
      }
      node->backward = std::forward<Fn>(fn);
    }
  }
  return Var<T>(std::move(node));
}

template <class T, class Fn>
Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, Fn&& fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& in : inputs) {
        if (in.requires_grad()) node->inputs.push_back(in.shared());
      }
      node->backward = std::forward<Fn>(fn);
    }
  }
  return Var<T>(std::move(node));
}

/// Back-propagates from `root` seeded with `seed` (defaults to ones).
template <class T>
void backward(const Var<T>& root, std::span<const T> seed = {}) {
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  auto g = root.node()->grad_buffer();
  if (seed.empty()) {
    for (auto& v : g) v += T{1};
  } else {
    if (seed.size() != g.size()) throw ShapeError("backward seed size mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && node->has_grad()) node->backward(*node);
  }
}

}  // namespace vsplit::ad
