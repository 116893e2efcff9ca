#include "facectl/autograd.hpp"

#include <stdexcept>
#include <unordered_set>

namespace facectl {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor& Node::grad_buffer() {
  if (grad.empty() && !value.empty()) grad = Tensor::zeros(value.shape());
  return grad;
}

void Node::accumulate(const Tensor& g) {
  if (!requires_grad) return;
  if (grad.empty()) {
    grad = g;
    return;
  }
  grad += g;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Var::grad() const {
  if (!node_) throw std::logic_error("grad() on undefined Var");
  if (node_->grad.empty()) return Tensor::zeros(node_->value.shape());
  return node_->grad;
}

Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
  Var out(std::move(value), false);
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const Var& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  Node& n = *out.node();
  n.requires_grad = true;
  n.parents.reserve(parents.size());
  for (Var& p : parents) n.parents.push_back(p.node());
  n.backward_fn = std::move(backward_fn);
  return out;
}

void backward(const Var& root) {
  if (!root.defined()) throw std::logic_error("backward on undefined Var");
  if (root.value().size() != 1) {
    throw std::invalid_argument("backward requires a scalar root, got shape " + to_string(root.shape()));
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS; `order` ends up parents-before-children.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(Tensor::full(root.shape(), 1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

}  // namespace facectl
