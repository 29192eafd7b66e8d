#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "cxrmt/error.hpp"

namespace cxrmt {

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

enum class OpKind {
  leaf,
  conv2d,
  batch_norm,
  relu,
  sigmoid,
  avg_pool,
  global_avg_pool,
  channel_concat,
  dense,
  upsample_nearest,
  upsample_bilinear,
  add,
  mul,
  sub,
  scale,
  log,
  clamp,
  sum,
  mean,
};

inline const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::conv2d: return "conv2d";
    case OpKind::batch_norm: return "batch_norm";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::avg_pool: return "avg_pool";
    case OpKind::global_avg_pool: return "global_avg_pool";
    case OpKind::channel_concat: return "channel_concat";
    case OpKind::dense: return "dense";
    case OpKind::upsample_nearest: return "upsample_nearest";
    case OpKind::upsample_bilinear: return "upsample_bilinear";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::sub: return "sub";
    case OpKind::scale: return "scale";
    case OpKind::log: return "log";
    case OpKind::clamp: return "clamp";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
  }
  return "?";
}

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One value in the dynamic graph. Non-leaf nodes own a closure that
// pushes their gradient into their inputs.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass reaches the node
  bool requires_grad = false;
  OpKind op = OpKind::leaf;
  std::vector<NodePtr> inputs;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

// Per-thread switch for inference: while disabled, op results neither
// require grad nor hold on to their inputs.
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size())
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " +
                       std::to_string(values.size()) + " values");
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> values(shape_numel(shape), 0.0);
    return from(std::move(shape), std::move(values), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    std::vector<double> values(shape_numel(shape), value);
    return from(std::move(shape), std::move(values), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->op == OpKind::leaf; }
  OpKind op() const { return node_->op; }

  std::span<const double> data() const { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double item() const {
    if (numel() != 1) throw ShapeError("item: tensor is not scalar " + shape_str(shape()));
    return node_->data[0];
  }

  // Leaves only: parameters are updated between steps, never while a graph
  // built on them is in use.
  std::span<double> mutable_data() {
    if (!is_leaf()) throw Error("mutable_data: only leaf tensors may be modified");
    return node_->data;
  }

  bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }
  void clear_grad() { node_->grad.clear(); }

  // A graph-free copy of the current values.
  Tensor detach() const { return from(shape(), node_->data, false); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// Topologically ordered view of the graph reachable from a root: inputs
// always precede the nodes that consume them.
class ComputeGraph {
 public:
  struct OpRecord {
    OpKind kind;
    std::vector<std::size_t> inputs;
    std::size_t output;
  };

  static ComputeGraph trace(const Tensor& root) {
    ComputeGraph g;
    std::unordered_map<const Node*, std::size_t> index;
    // Iterative post-order DFS; deep models would overflow a recursive walk.
    std::vector<std::pair<Node*, std::size_t>> stack;
    std::unordered_map<const Node*, bool> visited;
    stack.emplace_back(root.node().get(), 0);
    visited[root.node().get()] = true;
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node* child = node->inputs[next++].get();
        if (!visited[child]) {
          visited[child] = true;
          stack.emplace_back(child, 0);
        }
        continue;
      }
      index[node] = g.nodes_.size();
      g.nodes_.push_back(node);
      stack.pop_back();
    }
    for (std::size_t i = 0; i < g.nodes_.size(); ++i) {
      const Node* n = g.nodes_[i];
      if (n->op == OpKind::leaf) continue;
      OpRecord rec{n->op, {}, i};
      for (const auto& in : n->inputs) rec.inputs.push_back(index.at(in.get()));
      g.records_.push_back(std::move(rec));
    }
    return g;
  }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<OpRecord>& records() const { return records_; }
  const std::vector<Node*>& nodes() const { return nodes_; }

 private:
  std::vector<Node*> nodes_;
  std::vector<OpRecord> records_;
};

// Reverse-mode sweep from a scalar root. Leaf gradients accumulate across
// calls; intermediate gradients hold only the latest pass.
inline void backward(const Tensor& root) {
  if (!root.defined() || root.numel() != 1)
    throw ShapeError("backward: root must be a scalar, got " +
                     (root.defined() ? shape_str(root.shape()) : std::string("undefined")));
  if (!root.requires_grad()) return;
  auto graph = ComputeGraph::trace(root);
  const auto& nodes = graph.nodes();
  for (Node* n : nodes)
    if (n->op != OpKind::leaf && n->requires_grad) n->grad.assign(n->data.size(), 0.0);
  nodes.back()->ensure_grad();
  nodes.back()->grad[0] += 1.0;
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    Node* n = *it;
    if (n->op == OpKind::leaf || !n->requires_grad) continue;
    for (const auto& in : n->inputs)
      if (in->requires_grad) in->ensure_grad();
    n->backward_fn(*n);
  }
}

}  // namespace cxrmt
