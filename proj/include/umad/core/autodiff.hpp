#pragma once

#include "umad/core/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

namespace umad::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Array grad;  // lazily sized; empty until first accumulation
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward_fn;  // reads this->grad, accumulates into parents
  std::uint64_t id = 0;

  void ensure_grad() {
    if (grad.size() != value.numel()) grad = Array::Zero(value.numel());
  }
};

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

// Handle to a node in the dynamically built computation graph.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor t, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(t);
    node_->requires_grad = requires_grad;
    node_->id = next_node_id();
  }

  bool valid() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  Index numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Array& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (node_) node_->grad = Array::Zero(node_->value.numel());
  }
  NodePtr node() const { return node_; }

  double scalar() const { return node_->value.data[0]; }

 private:
  NodePtr node_;
};

// Builds a result node. If no parent requires grad the graph edge is dropped
// so inference builds no tape.
inline Var make_result(Tensor value, std::vector<Var> parents,
                       std::function<void(Node&)> backward_fn) {
  bool need = false;
  for (const auto& p : parents)
    if (p.requires_grad()) need = true;
  Var out(std::move(value), need);
  if (need) {
    auto n = out.node();
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward_fn);
  }
  return out;
}

// Reverse pass from a scalar root. Topological order by creation id.
inline void backward(const Var& root) {
  require(root.numel() == 1, "backward: root must be scalar");
  if (!root.requires_grad()) return;
  std::vector<NodePtr> order;
  std::unordered_set<Node*> seen;
  std::vector<NodePtr> stack{root.node()};
  while (!stack.empty()) {
    NodePtr n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || seen.count(n.get())) continue;
    seen.insert(n.get());
    order.push_back(n);
    for (auto& p : n->parents) stack.push_back(p);
  }
  std::sort(order.begin(), order.end(),
            [](const NodePtr& a, const NodePtr& b) { return a->id > b->id; });
  root.node()->ensure_grad();
  root.node()->grad[0] += 1.0;
  for (auto& n : order) {
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

inline void accumulate(const NodePtr& p, const Array& g) {
  if (!p->requires_grad) return;
  p->ensure_grad();
  p->grad += g;
}

}  // namespace umad::ad
