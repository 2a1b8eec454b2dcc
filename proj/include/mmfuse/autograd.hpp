#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mmfuse/tensor.hpp"

namespace mmfuse {

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording for its lifetime (evaluation, frozen paths).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads self.grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

/// Handle to a node in the tape. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  std::size_t size() const { return node_->value.size(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->grad.empty(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds a result node; records the backward closure only when some input
/// requires a gradient and recording is enabled.
template <typename T, typename Fn>
Var<T> make_op(Tensor<T> value, std::initializer_list<Var<T>> inputs, Fn&& fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  bool needs = false;
  if (grad_enabled())
    for (const auto& v : inputs) needs = needs || (v.defined() && v.requires_grad());
  if (needs) {
    node->requires_grad = true;
    for (const auto& v : inputs) node->parents.push_back(v.defined() ? v.node() : nullptr);
    node->backward = std::forward<Fn>(fn);
  }
  return Var<T>(std::move(node));
}

template <typename T, typename Fn>
Var<T> make_op(Tensor<T> value, const std::vector<Var<T>>& inputs, Fn&& fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  bool needs = false;
  if (grad_enabled())
    for (const auto& v : inputs) needs = needs || (v.defined() && v.requires_grad());
  if (needs) {
    node->requires_grad = true;
    for (const auto& v : inputs) node->parents.push_back(v.defined() ? v.node() : nullptr);
    node->backward = std::forward<Fn>(fn);
  }
  return Var<T>(std::move(node));
}

/// True when parent `i` of `self` wants a gradient.
template <typename T>
bool wants_grad(const Node<T>& self, std::size_t i) {
  return i < self.parents.size() && self.parents[i] && self.parents[i]->requires_grad;
}

/// Reverse-mode sweep from a scalar (or seeded) output.
template <typename T>
void backward(const Var<T>& out, const Tensor<T>* seed = nullptr) {
  if (!out.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{out.node().get(), 0}};
  seen.insert(out.node().get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node<T>* p = n->parents[idx++].get();
      if (p && p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  Tensor<T>& g = out.node()->grad_buffer();
  if (seed) {
    if (seed->shape() != g.shape()) throw ShapeError("backward seed shape mismatch");
    g = *seed;
  } else {
    g.fill(T{1});
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward) (*it)->backward(**it);
}

}  // namespace mmfuse
