#pragma once

#include <Eigen/Core>
#include <deque>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "framefuse/errors.hpp"

namespace framefuse::nn {

struct Parameter;

/// One entry on the tape: a matrix value, its gradient slot, and the closure
/// that pushes the gradient into its inputs.
struct Node {
  Eigen::MatrixXd value;
  Eigen::MatrixXd grad;
  std::function<void()> backward;
};

/// Lightweight handle to a Node owned by a Graph.
struct Value {
  Node* node = nullptr;
  const Eigen::MatrixXd& mat() const { return node->value; }
  Eigen::Index rows() const { return node->value.rows(); }
  Eigen::Index cols() const { return node->value.cols(); }
  double scalar() const { return node->value(0, 0); }
  explicit operator bool() const { return node != nullptr; }
};

/// Reverse-mode automatic differentiation over dense matrices. Operations
/// append nodes to a tape; creation order is a topological order, so
/// backward() is a single reverse sweep. All shapes are validated eagerly.
///
/// A graph constructed with grads disabled skips gradient allocation and
/// backward closures entirely; forward values are identical either way.
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  /// While false, param() creates frozen leaves (no gradient flow). Used to
  /// share backbone weights without training them.
  void set_params_trainable(bool trainable) { params_trainable_ = trainable; }

  Value constant(Eigen::MatrixXd m);
  Value input(Eigen::MatrixXd m);
  /// One node per distinct Parameter per graph; shared uses accumulate.
  Value param(Parameter& p);

  Value matmul(Value a, Value b);
  Value matmul_nt(Value a, Value b);  // a * b^T
  Value add(Value a, Value b);
  Value sub(Value a, Value b);
  Value add_rowvec(Value a, Value v);  // broadcast a 1 x n row over all rows
  Value cmul(Value a, Value b);
  Value scale(Value a, double s);
  Value add_const(Value a, double c);
  Value mul_scalar(Value a, Value s);  // s is 1 x 1
  Value div_scalar(Value a, Value s);  // s is 1 x 1
  Value softmax_rows(Value a);
  Value layer_norm(Value x, Value gain, Value bias);  // row-wise; gain/bias 1 x d
  Value gelu(Value a);
  Value exp_clamped(Value a, double max_input);
  Value log(Value a);
  Value logistic(Value a);
  Value clamp_min(Value a, double floor);
  Value col_block(Value a, int col0, int ncols);
  Value concat_cols(std::span<const Value> parts);
  Value cwise_max(std::span<const Value> xs);
  /// a is T x (groups*m) in planar channel blocks; returns T x m Euclidean
  /// norms across the group dimension.
  Value group_norms(Value a, int groups);
  Value sum(Value a);                                     // 1 x 1
  Value masked_sum(Value a, const Eigen::MatrixXd& mask); // 1 x 1, mask is a constant
  Value mean_all(Value a);                                // 1 x 1

  /// Seeds d(loss) = 1 and runs the reverse sweep. loss must be 1 x 1.
  void backward(Value loss);

  /// Adds scale * (gradient of each parameter used in this graph) into the
  /// corresponding Parameter::grad slot.
  void accumulate_param_grads(double scale = 1.0);

  /// Parameters touched by this graph with their in-graph gradients, in
  /// first-use order.
  const std::vector<std::pair<Parameter*, Node*>>& param_nodes() const { return param_nodes_; }

  std::size_t size() const { return nodes_.size(); }

 private:
  Node* make(Eigen::MatrixXd value);

  bool grad_enabled_;
  bool params_trainable_ = true;
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, Node*> param_cache_;
  std::vector<std::pair<Parameter*, Node*>> param_nodes_;
};

}  // namespace framefuse::nn
