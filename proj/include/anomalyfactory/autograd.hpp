#pragma once

// Minimal reverse-mode automatic differentiation over NCHW tensors.
//
// A Var is a shared handle to a graph node. Operations record their parents and
// a backward closure only when at least one input requires a gradient and
// recording is enabled (see NoGradGuard), so inference through frozen weights
// builds no graph at all.

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "anomalyfactory/tensor.hpp"

namespace af {

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& ensure_grad() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->ensure_grad(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }
  bool defined() const { return static_cast<bool>(node_); }
  const std::array<int, 4>& shape() const { return node_->value.shape(); }
  T item() const { return node_->value.item(); }

  void zero_grad() {
    if (node_->grad.size() == node_->value.size()) node_->grad.fill(T(0));
  }

  // Leaf copy of the value that does not propagate gradients.
  Var detach() const { return Var(node_->value, false); }

  // Back-propagates from this node, seeding its gradient with ones.
  void backward() const {
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node<T>* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->ensure_grad().fill(T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward_fn && n->grad.size() == n->value.size()) n->backward_fn(*n);
    }
  }

  // Drops the recorded graph below this node so intermediate buffers are freed.
  void release_graph() {
    node_->parents.clear();
    node_->backward_fn = nullptr;
  }

  std::shared_ptr<Node<T>> node_;
};

// Creates the result node of an op; wires parents only when a gradient is needed.
template <typename T>
Var<T> make_result(Tensor<T> value, std::initializer_list<Var<T>> inputs,
                   std::function<void(Node<T>&)> backward_fn) {
  Var<T> out(std::move(value), false);
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return out;
  out.node_->requires_grad = true;
  for (const auto& in : inputs) out.node_->parents.push_back(in.node_);
  out.node_->backward_fn = std::move(backward_fn);
  return out;
}

template <typename T>
Var<T> make_result(Tensor<T> value, const std::vector<Var<T>>& inputs,
                   std::function<void(Node<T>&)> backward_fn) {
  Var<T> out(std::move(value), false);
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return out;
  out.node_->requires_grad = true;
  for (const auto& in : inputs) out.node_->parents.push_back(in.node_);
  out.node_->backward_fn = std::move(backward_fn);
  return out;
}

// Accumulates into parent `i` if it takes a gradient.
template <typename T, typename F>
void accumulate(Node<T>& self, std::size_t i, F&& f) {
  Node<T>& p = *self.parents[i];
  if (!p.requires_grad) return;
  f(p.ensure_grad());
}

}  // namespace af
