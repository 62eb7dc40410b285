// Dense f64 matrices and a small reverse-mode autodiff graph.
#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace qstr::ndgrad {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;
using NodeId = std::size_t;

enum class Op {
  kParameter,
  kConstant,
  kMatMul,
  kAdd,
  kAddColumn,  // m×n plus an m×1 column broadcast over columns
  kRelu,
  kRowSoftmax,
  kConcatRows,
  kConcatCols,
  kSliceRows,
  kTranspose,
  kReshape,  // column-major reinterpretation
  kMul,      // elementwise
  kSum,
  kMean,
  kMse,
  kScale,
  kClip,
  kProjectColumns,  // each column h -> min(1, r/|h|) h
  kPick,            // gather entries by column-major linear index into 1×K
};

std::string_view op_name(Op op);

struct Payload {
  double scalar = 0.0;
  Index a = 0;
  Index b = 0;
  std::vector<Index> indices;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Row-stabilized softmax, usable outside graphs.
Matrix row_softmax(const Matrix& m);

class Gradients {
 public:
  explicit Gradients(std::size_t n) : grads_(n) {}
  bool contains(NodeId id) const { return id < grads_.size() && grads_[id].has_value(); }
  const Matrix& at(NodeId id) const;
  std::size_t count() const;

 private:
  friend class Graph;
  std::vector<std::optional<Matrix>> grads_;
};

class Graph {
 public:
  NodeId parameter(Matrix value);
  NodeId constant(Matrix value);
  NodeId apply(Op op, std::initializer_list<NodeId> inputs, Payload payload = {});
  NodeId apply(Op op, const std::vector<NodeId>& inputs, Payload payload = {});

  NodeId matmul(NodeId a, NodeId b) { return apply(Op::kMatMul, {a, b}); }
  NodeId add(NodeId a, NodeId b) { return apply(Op::kAdd, {a, b}); }
  NodeId add_column(NodeId a, NodeId col) { return apply(Op::kAddColumn, {a, col}); }
  NodeId relu(NodeId a) { return apply(Op::kRelu, {a}); }
  NodeId softmax(NodeId a) { return apply(Op::kRowSoftmax, {a}); }
  NodeId concat_rows(const std::vector<NodeId>& parts) { return apply(Op::kConcatRows, parts); }
  NodeId concat_cols(const std::vector<NodeId>& parts) { return apply(Op::kConcatCols, parts); }
  NodeId slice_rows(NodeId a, Index start, Index count);
  NodeId transpose(NodeId a) { return apply(Op::kTranspose, {a}); }
  NodeId reshape(NodeId a, Index rows, Index cols);
  NodeId mul(NodeId a, NodeId b) { return apply(Op::kMul, {a, b}); }
  NodeId sum(NodeId a) { return apply(Op::kSum, {a}); }
  NodeId mean(NodeId a) { return apply(Op::kMean, {a}); }
  NodeId mse(NodeId a, NodeId b) { return apply(Op::kMse, {a, b}); }
  NodeId scale(NodeId a, double s);
  NodeId clip(NodeId a, double tau);
  NodeId project_columns(NodeId a, double radius);
  NodeId pick(NodeId a, std::vector<Index> linear_indices);

  const Matrix& value(NodeId id) const;
  Op op(NodeId id) const { return nodes_.at(id).op; }
  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from a 1×1 node. Only nodes that depend on some parameter
  // receive a gradient; pure-constant subgraphs are skipped.
  Gradients backward(NodeId loss) const;

  // One flag per piecewise-linear decision (relu sign, clip saturation,
  // projection activity). Two evaluations with equal patterns lie on the
  // same linear piece.
  std::vector<std::uint8_t> kink_pattern() const;

 private:
  struct Node {
    Op op;
    std::vector<NodeId> inputs;
    Payload payload;
    Matrix value;
    bool needs_grad = false;
  };
  Matrix evaluate(Op op, const std::vector<NodeId>& inputs, const Payload& payload) const;
  void accumulate(const Node& node, const Matrix& g, std::vector<std::optional<Matrix>>& grads) const;
  std::vector<Node> nodes_;
};

// A loss graph built from a flat list of parameter tensors. `params[k]` must
// be the node bound to the k-th tensor.
struct BuiltLoss {
  Graph graph;
  NodeId loss = 0;
  std::vector<NodeId> params;
};
using LossBuilder = std::function<BuiltLoss(const std::vector<Matrix>&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t tensor = 0;
  Index row = 0;
  Index col = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;
  bool passed = true;
};

// Central differences per coordinate. Coordinates whose ±h probes land on a
// different linear piece than the base point are excluded.
GradCheckReport grad_check(const LossBuilder& builder, const std::vector<Matrix>& params, double h,
                           double tol);

}  // namespace qstr::ndgrad
