#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "facectl/tensor.hpp"

namespace facectl {

// Reverse-mode automatic differentiation over Tensor values.
//
// A Var is a shared handle to a graph node. Leaves created with
// Var::parameter() persist across steps and accumulate gradients; every op
// result records its parents and a closure that pushes its gradient back.
// Graphs are freed when the last handle to the root goes away.
struct Node {
  Tensor value;
  Tensor grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& grad_buffer();
  void accumulate(const Tensor& g);
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  static Var parameter(Tensor value) { return Var(std::move(value), true); }
  static Var constant(Tensor value) { return Var(std::move(value), false); }

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  // Returns the accumulated gradient, or zeros if none has arrived.
  Tensor grad() const;
  void zero_grad() { node_->grad = Tensor(); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Seeds d(root)/d(root) = 1 (root must hold a single element) and runs the
// recorded closures in reverse topological order.
void backward(const Var& root);

// Builds an op result. When no parent requires a gradient (or grad mode is
// off) the result is a constant and the closure is dropped.
Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

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

}  // namespace facectl
