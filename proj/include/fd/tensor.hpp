#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fd/common.hpp"

namespace fd {

namespace detail {

template <typename S>
struct Node {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until first needed; same length as value after
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backprop;  // accumulates this->grad into parents' grads

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

}  // namespace detail

// Dense row-major tensor with an optional reverse-mode gradient slot.
// A TensorT is a cheap handle; copies share the underlying node, which is what
// lets define-by-run graphs hold their inputs alive.
//
// S is float for training and checkpoints, double for gradient-check oracles.
template <typename S>
class TensorT {
 public:
  using Scalar = S;

  TensorT() = default;

  static TensorT zeros(Shape shape) {
    TensorT t;
    t.n_ = std::make_shared<detail::Node<S>>();
    i64 n = numel(shape);
    FD_CHECK(n >= 0, "tensor extents must be nonnegative");
    t.n_->shape = std::move(shape);
    t.n_->value.assign(static_cast<size_t>(n), S(0));
    return t;
  }

  static TensorT full(Shape shape, S v) {
    TensorT t = zeros(std::move(shape));
    for (auto& x : t.n_->value) x = v;
    return t;
  }

  static TensorT from_data(Shape shape, std::vector<S> data) {
    FD_CHECK(numel(shape) == static_cast<i64>(data.size()),
             "from_data: shape " + shape_str(shape) + " does not match data length " +
                 std::to_string(data.size()));
    TensorT t;
    t.n_ = std::make_shared<detail::Node<S>>();
    t.n_->shape = std::move(shape);
    t.n_->value = std::move(data);
    return t;
  }

  static TensorT scalar(S v) { return from_data({}, {v}); }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  i64 dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
  i64 size() const { return static_cast<i64>(n_->value.size()); }

  std::vector<S>& value() { return n_->value; }
  const std::vector<S>& value() const { return n_->value; }
  S item() const {
    FD_CHECK(size() == 1, "item: tensor is not scalar");
    return n_->value[0];
  }

  bool requires_grad() const { return n_ && n_->requires_grad; }
  TensorT& set_requires_grad(bool b) {
    n_->requires_grad = b;
    return *this;
  }

  std::vector<S>& grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  const std::vector<S>& grad() const {
    n_->ensure_grad();
    return n_->grad;
  }
  bool has_grad() const { return !n_->grad.empty(); }
  void zero_grad() { n_->grad.assign(n_->value.size(), S(0)); }

  // Deep copy of values only; the copy is a fresh leaf.
  TensorT clone_detached() const {
    TensorT t = from_data(shape(), value());
    return t;
  }

  // Reverse-mode sweep from a scalar. Interior grads are fresh per forward
  // pass; leaf grads accumulate until zero_grad.
  void backward() {
    FD_CHECK(defined() && size() == 1, "backward: root must be a defined scalar");
    if (!n_->requires_grad) return;
    std::vector<detail::Node<S>*> order;
    topo_sort(n_.get(), order);
    n_->ensure_grad();
    n_->grad[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backprop) (*it)->backprop();
    }
  }

  // Graph plumbing used by the op library: record parents and the gradient
  // closure only when some parent actually needs gradients.
  void attach(std::initializer_list<TensorT> parents, std::function<void()> fn) {
    bool need = false;
    for (const auto& p : parents) need = need || p.requires_grad();
    if (!need) return;
    n_->requires_grad = true;
    for (const auto& p : parents)
      if (p.defined()) n_->parents.push_back(p.n_);
    n_->backprop = std::move(fn);
  }

  detail::Node<S>* node() const { return n_.get(); }
  std::shared_ptr<detail::Node<S>> node_ptr() const { return n_; }

 private:
  static void topo_sort(detail::Node<S>* root, std::vector<detail::Node<S>*>& order) {
    // Iterative post-order over grad-requiring ancestors.
    std::unordered_set<detail::Node<S>*> seen;
    struct Frame {
      detail::Node<S>* n;
      size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({root, 0});
    seen.insert(root);
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next < f.n->parents.size()) {
        detail::Node<S>* p = f.n->parents[f.next++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(f.n);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<detail::Node<S>> n_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

}  // namespace fd
