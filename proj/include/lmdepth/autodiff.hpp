#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lmdepth/tensor.hpp"

namespace lmdepth {

template <class T>
class Var;

namespace detail {

template <class T>
struct Node {
  Tensor<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Propagates this node's grad into the grads of its inputs.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return inputs.empty(); }

  // Grad buffer of input i, or nullptr when that input is not differentiable.
  T* input_grad(std::size_t i) {
    auto& in = *inputs[i];
    return in.requires_grad ? in.grad.data() : nullptr;
  }
  const Tensor<T>& input_value(std::size_t i) const { return inputs[i]->value; }
};

inline thread_local bool grad_enabled = true;

}  // namespace detail

/// Disables graph recording on this thread while alive.
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

/// Handle to a value in the autodiff graph. Copies share the node.
template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Var parameter(Tensor<T> value) { return Var(std::move(value), true); }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  // Direct write access for optimizers and weight loading; never used while
  // a graph that reads this value is pending backward.
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  std::span<const T> data() const { return node_->value.data(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  Tensor<T> grad_tensor() const {
    if (node_->grad.empty()) return Tensor<T>(shape(), T{0});
    return Tensor<T>(shape(), node_->grad);
  }
  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
  }

  detail::Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

template <class T>
Var<T> constant(Tensor<T> t) {
  return Var<T>(std::move(t), false);
}

namespace detail {

// Builds the result node of a primitive. The backward rule is recorded only
// when grad mode is on and at least one input is differentiable.
template <class T, class F>
Var<T> make_op(Tensor<T> out, std::initializer_list<Var<T>> inputs, F&& backward) {
  Var<T> result(std::move(out), false);
  if (!grad_enabled) return result;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return result;
  auto* node = result.node();
  node->requires_grad = true;
  node->inputs.reserve(inputs.size());
  for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
  node->backward = std::forward<F>(backward);
  return result;
}

template <class T, class F>
Var<T> make_op(Tensor<T> out, const std::vector<Var<T>>& inputs, F&& backward) {
  Var<T> result(std::move(out), false);
  if (!grad_enabled) return result;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return result;
  auto* node = result.node();
  node->requires_grad = true;
  for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
  node->backward = std::forward<F>(backward);
  return result;
}

}  // namespace detail

/// Differentiable nodes reachable from a root, in topological order: every
/// node appears after all of its inputs.
template <class T>
class Graph {
 public:
  explicit Graph(const Var<T>& root) {
    if (!root.requires_grad()) return;
    std::unordered_set<const detail::Node<T>*> seen;
    // Iterative post-order DFS; deep decoder chains would overflow recursion.
    std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        auto* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  const std::vector<detail::Node<T>*>& nodes() const { return order_; }
  std::size_t size() const { return order_.size(); }

 private:
  std::vector<detail::Node<T>*> order_;
};

/// Reverse-mode sweep from a scalar loss. Leaf grads accumulate across calls
/// until zeroed; interior grads are rebuilt on every call.
template <class T>
void backward(const Var<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) return;
  Graph<T> graph(loss);
  for (auto* node : graph.nodes()) {
    if (!node->is_leaf()) {
      node->grad.assign(node->value.size(), T{0});
    } else if (node->grad.size() != node->value.size()) {
      node->grad.assign(node->value.size(), T{0});
    }
  }
  auto* root = loss.node();
  root->grad[0] += T{1};
  const auto& order = graph.nodes();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (node->backward) node->backward(*node);
  }
  // Release interior buffers; only leaves keep their grads.
  for (auto* node : order) {
    if (!node->is_leaf()) {
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

}  // namespace lmdepth
