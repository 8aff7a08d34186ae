#pragma once

// Dense tensors with tape-free reverse-mode differentiation. Each op result
// holds shared references to its inputs together with a closure that pushes
// the result gradient back into them; backward() walks that DAG in reverse
// topological order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "storylab/errors.hpp"

namespace storylab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Thread-local switch controlling whether op results record their inputs.
class GradMode {
 public:
  static bool enabled() noexcept { return flag(); }
  static void set(bool on) noexcept { flag() = on; }

 private:
  static bool& flag() noexcept {
    thread_local bool on = true;
    return on;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::function<void(TensorNode&)> backward_fn;

  bool is_leaf() const noexcept { return !backward_fn; }

  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto node = std::make_shared<Node>();
    node->data.assign(shape_numel(shape), T(0));
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " does not hold " +
                           std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }
  /// Size of the last axis.
  std::size_t cols() const { return node_->shape.back(); }
  /// Product of all axes but the last.
  std::size_t rows() const { return numel() / cols(); }

  std::span<const T> data() const { return node_->data; }
  /// Direct write access; only optimizers and activation hooks use this.
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  /// Same values, no history.
  Tensor detach() const { return from(shape(), node_->data, false); }

  bool all_finite() const {
    return std::all_of(node_->data.begin(), node_->data.end(),
                       [](T x) { return std::isfinite(x); });
  }

  /// Reverse-mode accumulation from this scalar. Leaf gradients accumulate
  /// across calls until zero_grad(); intermediate gradients are recomputed.
  void backward() const;

  Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

template <class T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<T>* t) { return t->requires_grad(); });
}

/// Builds an op result and, when differentiation is active, wires its
/// backward closure to the given inputs.
template <class T, class Fn>
Tensor<T> make_result(Shape shape, std::vector<T> values,
                      std::initializer_list<const Tensor<T>*> inputs, Fn&& backward) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  if (GradMode::enabled() && any_requires_grad<T>(inputs)) {
    node->requires_grad = true;
    for (const Tensor<T>* t : inputs) node->inputs.push_back(t->node_ptr());
    node->backward_fn = std::forward<Fn>(backward);
  }
  return Tensor<T>(std::move(node));
}

}  // namespace detail

template <class T>
void Tensor<T>::backward() const {
  if (!defined() || numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        (defined() ? shape_str(shape()) : std::string("<undefined>")));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS; reversing it yields a valid backward schedule.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->data.size(), T(0));
  }
  node_->ensure_grad();
  if (node_->is_leaf()) {
    node_->grad[0] += T(1);
  } else {
    node_->grad[0] = T(1);
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->is_leaf()) {
      for (auto& input : n->inputs) {
        if (input->requires_grad) input->ensure_grad();
      }
      n->backward_fn(*n);
    }
  }
  // Free intermediate gradients; leaves keep theirs.
  for (Node* n : order) {
    if (!n->is_leaf()) std::vector<T>().swap(n->grad);
  }
}

}  // namespace storylab
