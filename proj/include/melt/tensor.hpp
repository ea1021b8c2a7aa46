#pragma once

// Dense tensors with reverse-mode differentiation.
//
// A Tensor is a shared handle to a graph node holding a row-major Eigen
// matrix. Vectors are 1 x n rows. Ops that consume at least one tensor with
// requires_grad record a backward rule and keep their inputs alive; ops on
// constants produce constants and record nothing.

#include <Eigen/Dense>

#include <array>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "melt/errors.hpp"

namespace melt {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Shape = std::array<Index, 2>;

inline std::string shape_string(Index rows, Index cols) {
  std::ostringstream out;
  out << '[' << rows << 'x' << cols << ']';
  return out.str();
}

template <typename Scalar>
class Tensor;

namespace detail {

template <typename Scalar>
struct Node {
  using Mat = Matrix<Scalar>;
  // Receives d(loss)/d(output) and the forward output; accumulates into inputs.
  using BackwardFn = std::function<void(const Mat& grad_out, const Mat& value)>;

  Mat value;
  Mat grad;
  bool requires_grad = false;
  bool leaf = true;
  std::string name;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
};

template <typename Scalar, typename Expr>
void accumulate(Node<Scalar>& node, const Expr& delta) {
  if (!node.requires_grad) return;
  if (node.grad.size() == 0) {
    node.grad = delta;
  } else {
    node.grad += delta;
  }
}

}  // namespace detail

template <typename Scalar>
class Tensor {
 public:
  using Mat = Matrix<Scalar>;
  using NodeType = detail::Node<Scalar>;

  Tensor() = default;

  static Tensor constant(Mat value) {
    auto node = std::make_shared<NodeType>();
    node->value = std::move(value);
    return Tensor(std::move(node));
  }

  static Tensor parameter(Mat value, std::string name = {}) {
    auto node = std::make_shared<NodeType>();
    node->value = std::move(value);
    node->requires_grad = true;
    node->name = std::move(name);
    return Tensor(std::move(node));
  }

  static Tensor scalar(Scalar v) {
    Mat m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
  }

  /// Result of a differentiable op. Inputs are kept only when some input
  /// requires a gradient.
  static Tensor from_op(Mat value, std::vector<Tensor> inputs,
                        typename NodeType::BackwardFn backward) {
    auto node = std::make_shared<NodeType>();
    node->value = std::move(value);
    node->leaf = false;
    for (const auto& in : inputs) {
      if (in.requires_grad()) node->requires_grad = true;
    }
    if (node->requires_grad) {
      node->inputs.reserve(inputs.size());
      for (auto& in : inputs) node->inputs.push_back(in.node_);
      node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
  }

  bool defined() const { return static_cast<bool>(node_); }

  const Mat& value() const { return node_->value; }
  /// Direct write access for optimizers and checkpoint loading.
  Mat& mutable_value() { return node_->value; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_->grad.size() != 0; }
  const Mat& grad() const { return node_->grad; }
  Mat& mutable_grad() { return node_->grad; }
  void zero_grad() { node_->grad.setZero(node_->value.rows(), node_->value.cols()); }
  void clear_grad() { node_->grad.resize(0, 0); }

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  Shape shape() const { return {rows(), cols()}; }
  std::string shape_str() const { return shape_string(rows(), cols()); }

  Scalar item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str());
    return node_->value(0, 0);
  }

  const std::string& name() const { return node_->name; }
  void set_name(std::string name) { node_->name = std::move(name); }

  /// Fresh leaf with copied value; shares nothing with this tensor.
  Tensor detach_copy() const {
    Tensor out = requires_grad() ? parameter(value(), name()) : constant(value());
    out.set_name(name());
    return out;
  }

  NodeType* node() const { return node_.get(); }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<NodeType> node) : node_(std::move(node)) {}

  std::shared_ptr<NodeType> node_;
};

/// Topologically ordered list of the differentiable nodes reachable from a
/// root. Inputs always precede the operations that consume them.
template <typename Scalar>
class Tape {
 public:
  using NodeType = detail::Node<Scalar>;

  explicit Tape(const Tensor<Scalar>& root) {
    if (!root.requires_grad()) return;
    std::unordered_set<const NodeType*> visited;
    // Iterative post-order DFS.
    std::vector<std::pair<NodeType*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    visited.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        NodeType* child = node->inputs[next++].get();
        if (child->requires_grad && visited.insert(child).second) {
          stack.emplace_back(child, 0);
        }
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::size_t size() const { return order_.size(); }
  const std::vector<NodeType*>& order() const { return order_; }

  /// Seeds the root (last node) with d(root)/d(root) = 1 and runs every
  /// backward rule once in reverse order. Leaf gradients accumulate.
  void run() {
    if (order_.empty()) return;
    for (NodeType* node : order_) {
      if (!node->leaf) node->grad.setZero(node->value.rows(), node->value.cols());
    }
    NodeType* root = order_.back();
    if (root->leaf) {
      detail::accumulate(*root, Matrix<Scalar>::Ones(1, 1));
      return;
    }
    root->grad.setOnes(1, 1);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      NodeType* node = *it;
      if (node->backward) node->backward(node->grad, node->value);
    }
  }

 private:
  std::vector<NodeType*> order_;
};

/// Populates d(loss)/d(t) for every requires_grad tensor reachable from loss.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  if (loss.size() != 1) {
    throw DimensionError("backward() needs a scalar loss, got " + loss.shape_str());
  }
  Tape<Scalar>(loss).run();
}

}  // namespace melt
