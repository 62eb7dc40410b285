#include "qstr/ndgrad.hpp"

#include <cmath>
#include <sstream>

namespace qstr::ndgrad {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

[[noreturn]] void shape_fail(Op op, const std::vector<const Matrix*>& in, const std::string& why) {
  std::ostringstream os;
  os << op_name(op) << ": " << why << " (inputs";
  for (const Matrix* m : in) os << " " << shape_str(*m);
  os << ")";
  throw ShapeError(os.str());
}

std::size_t expected_arity(Op op) {
  switch (op) {
    case Op::kParameter:
    case Op::kConstant:
      return 0;
    case Op::kMatMul:
    case Op::kAdd:
    case Op::kAddColumn:
    case Op::kMul:
    case Op::kMse:
      return 2;
    case Op::kConcatRows:
    case Op::kConcatCols:
      return SIZE_MAX;  // variadic
    default:
      return 1;
  }
}

}  // namespace

std::string_view op_name(Op op) {
  switch (op) {
    case Op::kParameter: return "parameter";
    case Op::kConstant: return "constant";
    case Op::kMatMul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kAddColumn: return "add_column";
    case Op::kRelu: return "relu";
    case Op::kRowSoftmax: return "row_softmax";
    case Op::kConcatRows: return "concat_rows";
    case Op::kConcatCols: return "concat_cols";
    case Op::kSliceRows: return "slice_rows";
    case Op::kTranspose: return "transpose";
    case Op::kReshape: return "reshape";
    case Op::kMul: return "mul";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kMse: return "mse";
    case Op::kScale: return "scale";
    case Op::kClip: return "clip";
    case Op::kProjectColumns: return "project_columns";
    case Op::kPick: return "pick";
  }
  return "unknown";
}

Matrix row_softmax(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (Index i = 0; i < m.rows(); ++i) {
    const double mx = m.row(i).maxCoeff();
    double total = 0.0;
    for (Index j = 0; j < m.cols(); ++j) {
      out(i, j) = std::exp(m(i, j) - mx);
      total += out(i, j);
    }
    out.row(i) /= total;
  }
  return out;
}

const Matrix& Gradients::at(NodeId id) const {
  if (!contains(id)) throw std::out_of_range("no gradient for node " + std::to_string(id));
  return *grads_[id];
}

std::size_t Gradients::count() const {
  std::size_t n = 0;
  for (const auto& g : grads_) n += g.has_value() ? 1 : 0;
  return n;
}

NodeId Graph::parameter(Matrix value) {
  nodes_.push_back(Node{Op::kParameter, {}, {}, std::move(value), true});
  return nodes_.size() - 1;
}

NodeId Graph::constant(Matrix value) {
  nodes_.push_back(Node{Op::kConstant, {}, {}, std::move(value), false});
  return nodes_.size() - 1;
}

NodeId Graph::apply(Op op, std::initializer_list<NodeId> inputs, Payload payload) {
  return apply(op, std::vector<NodeId>(inputs), std::move(payload));
}

NodeId Graph::apply(Op op, const std::vector<NodeId>& inputs, Payload payload) {
  if (op == Op::kParameter || op == Op::kConstant) {
    throw std::invalid_argument("apply: use parameter()/constant() for leaves");
  }
  const std::size_t arity = expected_arity(op);
  if (arity == SIZE_MAX ? inputs.empty() : inputs.size() != arity) {
    throw ShapeError(std::string(op_name(op)) + ": wrong number of inputs");
  }
  bool needs = false;
  for (NodeId id : inputs) {
    if (id >= nodes_.size()) throw std::out_of_range(std::string(op_name(op)) + ": unknown input node");
    needs = needs || nodes_[id].needs_grad;
  }
  Matrix v = evaluate(op, inputs, payload);
  nodes_.push_back(Node{op, inputs, std::move(payload), std::move(v), needs});
  return nodes_.size() - 1;
}

NodeId Graph::slice_rows(NodeId a, Index start, Index count) {
  Payload p;
  p.a = start;
  p.b = count;
  return apply(Op::kSliceRows, {a}, p);
}

NodeId Graph::reshape(NodeId a, Index rows, Index cols) {
  Payload p;
  p.a = rows;
  p.b = cols;
  return apply(Op::kReshape, {a}, p);
}

NodeId Graph::scale(NodeId a, double s) {
  Payload p;
  p.scalar = s;
  return apply(Op::kScale, {a}, p);
}

NodeId Graph::clip(NodeId a, double tau) {
  if (!(tau > 0)) throw std::invalid_argument("clip: tau must be positive");
  Payload p;
  p.scalar = tau;
  return apply(Op::kClip, {a}, p);
}

NodeId Graph::project_columns(NodeId a, double radius) {
  if (!(radius >= 0)) throw std::invalid_argument("project_columns: radius must be >= 0");
  Payload p;
  p.scalar = radius;
  return apply(Op::kProjectColumns, {a}, p);
}

NodeId Graph::pick(NodeId a, std::vector<Index> linear_indices) {
  Payload p;
  p.indices = std::move(linear_indices);
  return apply(Op::kPick, {a}, p);
}

const Matrix& Graph::value(NodeId id) const { return nodes_.at(id).value; }

Matrix Graph::evaluate(Op op, const std::vector<NodeId>& inputs, const Payload& payload) const {
  std::vector<const Matrix*> in;
  in.reserve(inputs.size());
  for (NodeId id : inputs) in.push_back(&nodes_[id].value);
  const Matrix& x = *in[0];

  switch (op) {
    case Op::kMatMul:
      if (x.cols() != in[1]->rows()) shape_fail(op, in, "inner dimensions differ");
      return x * *in[1];
    case Op::kAdd:
      if (x.rows() != in[1]->rows() || x.cols() != in[1]->cols()) shape_fail(op, in, "shapes differ");
      return x + *in[1];
    case Op::kAddColumn:
      if (in[1]->cols() != 1 || in[1]->rows() != x.rows()) shape_fail(op, in, "need m×n and m×1");
      return x.colwise() + in[1]->col(0);
    case Op::kRelu:
      return x.cwiseMax(0.0);
    case Op::kRowSoftmax:
      return row_softmax(x);
    case Op::kConcatRows: {
      Index rows = 0;
      for (const Matrix* m : in) {
        if (m->cols() != x.cols()) shape_fail(op, in, "column counts differ");
        rows += m->rows();
      }
      Matrix out(rows, x.cols());
      Index at = 0;
      for (const Matrix* m : in) {
        out.middleRows(at, m->rows()) = *m;
        at += m->rows();
      }
      return out;
    }
    case Op::kConcatCols: {
      Index cols = 0;
      for (const Matrix* m : in) {
        if (m->rows() != x.rows()) shape_fail(op, in, "row counts differ");
        cols += m->cols();
      }
      Matrix out(x.rows(), cols);
      Index at = 0;
      for (const Matrix* m : in) {
        out.middleCols(at, m->cols()) = *m;
        at += m->cols();
      }
      return out;
    }
    case Op::kSliceRows:
      if (payload.a < 0 || payload.b < 0 || payload.a + payload.b > x.rows()) {
        shape_fail(op, in, "row range out of bounds");
      }
      return x.middleRows(payload.a, payload.b);
    case Op::kTranspose:
      return x.transpose();
    case Op::kReshape: {
      if (payload.a * payload.b != x.size()) shape_fail(op, in, "element count changes");
      Matrix out = x;
      out.resize(payload.a, payload.b);
      return out;
    }
    case Op::kMul:
      if (x.rows() != in[1]->rows() || x.cols() != in[1]->cols()) shape_fail(op, in, "shapes differ");
      return x.cwiseProduct(*in[1]);
    case Op::kSum:
      return Matrix::Constant(1, 1, x.sum());
    case Op::kMean:
      if (x.size() == 0) shape_fail(op, in, "empty input");
      return Matrix::Constant(1, 1, x.mean());
    case Op::kMse:
      if (x.rows() != in[1]->rows() || x.cols() != in[1]->cols()) shape_fail(op, in, "shapes differ");
      if (x.size() == 0) shape_fail(op, in, "empty input");
      return Matrix::Constant(1, 1, (x - *in[1]).squaredNorm() / static_cast<double>(x.size()));
    case Op::kScale:
      return payload.scalar * x;
    case Op::kClip:
      return x.cwiseMax(-payload.scalar).cwiseMin(payload.scalar);
    case Op::kProjectColumns: {
      Matrix out = x;
      for (Index j = 0; j < x.cols(); ++j) {
        const double norm = x.col(j).norm();
        if (norm > payload.scalar) out.col(j) *= payload.scalar / norm;
      }
      return out;
    }
    case Op::kPick: {
      Matrix out(1, static_cast<Index>(payload.indices.size()));
      for (std::size_t k = 0; k < payload.indices.size(); ++k) {
        const Index idx = payload.indices[k];
        if (idx < 0 || idx >= x.size()) shape_fail(op, in, "index out of range");
        out(0, static_cast<Index>(k)) = x.data()[idx];
      }
      return out;
    }
    case Op::kParameter:
    case Op::kConstant:
      break;
  }
  throw std::logic_error("evaluate: unhandled op");
}

void Graph::accumulate(const Node& node, const Matrix& g, std::vector<std::optional<Matrix>>& grads) const {
  auto push = [&](NodeId id, const Matrix& delta) {
    if (!nodes_[id].needs_grad) return;
    if (grads[id]) {
      *grads[id] += delta;
    } else {
      grads[id] = delta;
    }
  };
  const auto& ins = node.inputs;
  auto val = [&](std::size_t k) -> const Matrix& { return nodes_[ins[k]].value; };

  switch (node.op) {
    case Op::kParameter:
    case Op::kConstant:
      return;
    case Op::kMatMul:
      if (nodes_[ins[0]].needs_grad) push(ins[0], g * val(1).transpose());
      if (nodes_[ins[1]].needs_grad) push(ins[1], val(0).transpose() * g);
      return;
    case Op::kAdd:
      push(ins[0], g);
      push(ins[1], g);
      return;
    case Op::kAddColumn:
      push(ins[0], g);
      if (nodes_[ins[1]].needs_grad) push(ins[1], g.rowwise().sum());
      return;
    case Op::kRelu:
      push(ins[0], g.cwiseProduct((val(0).array() > 0.0).cast<double>().matrix()));
      return;
    case Op::kRowSoftmax: {
      const Matrix& y = node.value;
      Matrix dx = y.cwiseProduct(g);
      const Eigen::VectorXd inner = dx.rowwise().sum();
      dx -= y.cwiseProduct(inner.replicate(1, y.cols()));
      push(ins[0], dx);
      return;
    }
    case Op::kConcatRows: {
      Index at = 0;
      for (std::size_t k = 0; k < ins.size(); ++k) {
        const Index r = val(k).rows();
        push(ins[k], g.middleRows(at, r));
        at += r;
      }
      return;
    }
    case Op::kConcatCols: {
      Index at = 0;
      for (std::size_t k = 0; k < ins.size(); ++k) {
        const Index c = val(k).cols();
        push(ins[k], g.middleCols(at, c));
        at += c;
      }
      return;
    }
    case Op::kSliceRows: {
      Matrix dx = Matrix::Zero(val(0).rows(), val(0).cols());
      dx.middleRows(node.payload.a, node.payload.b) = g;
      push(ins[0], dx);
      return;
    }
    case Op::kTranspose:
      push(ins[0], g.transpose());
      return;
    case Op::kReshape: {
      Matrix dx = g;
      dx.resize(val(0).rows(), val(0).cols());
      push(ins[0], dx);
      return;
    }
    case Op::kMul:
      if (nodes_[ins[0]].needs_grad) push(ins[0], g.cwiseProduct(val(1)));
      if (nodes_[ins[1]].needs_grad) push(ins[1], g.cwiseProduct(val(0)));
      return;
    case Op::kSum:
      push(ins[0], Matrix::Constant(val(0).rows(), val(0).cols(), g(0, 0)));
      return;
    case Op::kMean:
      push(ins[0], Matrix::Constant(val(0).rows(), val(0).cols(), g(0, 0) / static_cast<double>(val(0).size())));
      return;
    case Op::kMse: {
      const Matrix diff = (val(0) - val(1)) * (2.0 * g(0, 0) / static_cast<double>(val(0).size()));
      push(ins[0], diff);
      if (nodes_[ins[1]].needs_grad) push(ins[1], -diff);
      return;
    }
    case Op::kScale:
      push(ins[0], node.payload.scalar * g);
      return;
    case Op::kClip: {
      const double tau = node.payload.scalar;
      push(ins[0], g.cwiseProduct((val(0).array().abs() < tau).cast<double>().matrix()));
      return;
    }
    case Op::kProjectColumns: {
      const Matrix& x = val(0);
      const double r = node.payload.scalar;
      Matrix dx = g;
      for (Index j = 0; j < x.cols(); ++j) {
        const double norm = x.col(j).norm();
        if (norm <= r) continue;
        // d/dh [r h/|h|] applied to g: (r/|h|)(g - h (h.g)/|h|^2)
        const double hg = x.col(j).dot(g.col(j));
        dx.col(j) = (r / norm) * (g.col(j) - x.col(j) * (hg / (norm * norm)));
      }
      push(ins[0], dx);
      return;
    }
    case Op::kPick: {
      Matrix dx = Matrix::Zero(val(0).rows(), val(0).cols());
      for (std::size_t k = 0; k < node.payload.indices.size(); ++k) {
        dx.data()[node.payload.indices[k]] += g(0, static_cast<Index>(k));
      }
      push(ins[0], dx);
      return;
    }
  }
}

Gradients Graph::backward(NodeId loss) const {
  if (loss >= nodes_.size()) throw std::out_of_range("backward: unknown loss node");
  const Matrix& lv = nodes_[loss].value;
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ShapeError("backward: loss must be 1x1, got " + shape_str(lv));
  }
  Gradients out(nodes_.size());
  auto& grads = out.grads_;
  if (!nodes_[loss].needs_grad) return out;
  grads[loss] = Matrix::Ones(1, 1);
  for (std::size_t k = loss + 1; k-- > 0;) {
    if (!grads[k]) continue;
    const Node& node = nodes_[k];
    if (node.op == Op::kParameter || node.op == Op::kConstant) continue;
    accumulate(node, *grads[k], grads);
  }
  return out;
}

std::vector<std::uint8_t> Graph::kink_pattern() const {
  std::vector<std::uint8_t> bits;
  for (const Node& node : nodes_) {
    if (node.op == Op::kRelu) {
      const Matrix& x = nodes_[node.inputs[0]].value;
      for (Index k = 0; k < x.size(); ++k) bits.push_back(x.data()[k] > 0.0 ? 1 : 0);
    } else if (node.op == Op::kClip) {
      const Matrix& x = nodes_[node.inputs[0]].value;
      for (Index k = 0; k < x.size(); ++k) bits.push_back(std::abs(x.data()[k]) < node.payload.scalar ? 1 : 0);
    } else if (node.op == Op::kProjectColumns) {
      const Matrix& x = nodes_[node.inputs[0]].value;
      for (Index j = 0; j < x.cols(); ++j) bits.push_back(x.col(j).norm() > node.payload.scalar ? 1 : 0);
    }
  }
  return bits;
}

GradCheckReport grad_check(const LossBuilder& builder, const std::vector<Matrix>& params, double h,
                           double tol) {
  if (!(h > 0)) throw std::invalid_argument("grad_check: h must be positive");
  BuiltLoss base = builder(params);
  if (base.params.size() != params.size()) {
    throw std::invalid_argument("grad_check: builder returned wrong parameter count");
  }
  const double f0 = base.graph.value(base.loss)(0, 0);
  if (!std::isfinite(f0)) throw std::runtime_error("grad_check: non-finite loss at base point");
  const Gradients grads = base.graph.backward(base.loss);
  const auto pattern = base.graph.kink_pattern();

  GradCheckReport rep;
  std::vector<Matrix> probe = params;
  for (std::size_t t = 0; t < params.size(); ++t) {
    const Matrix zero = Matrix::Zero(params[t].rows(), params[t].cols());
    const Matrix& analytic = grads.contains(base.params[t]) ? grads.at(base.params[t]) : zero;
    for (Index c = 0; c < params[t].cols(); ++c) {
      for (Index r = 0; r < params[t].rows(); ++r) {
        const double orig = params[t](r, c);
        probe[t](r, c) = orig + h;
        BuiltLoss plus = builder(probe);
        probe[t](r, c) = orig - h;
        BuiltLoss minus = builder(probe);
        probe[t](r, c) = orig;
        const double fp = plus.graph.value(plus.loss)(0, 0);
        const double fm = minus.graph.value(minus.loss)(0, 0);
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
          throw std::runtime_error("grad_check: non-finite loss while probing");
        }
        if (plus.graph.kink_pattern() != pattern || minus.graph.kink_pattern() != pattern) {
          ++rep.excluded;
          continue;
        }
        const double num = (fp - fm) / (2.0 * h);
        const double ana = analytic(r, c);
        const double denom = std::max({std::abs(ana), std::abs(num), 1e-8});
        const double rel = std::abs(ana - num) / denom;
        ++rep.checked;
        if (rel > rep.max_rel_error) {
          rep.max_rel_error = rel;
          rep.tensor = t;
          rep.row = r;
          rep.col = c;
          rep.analytic = ana;
          rep.numeric = num;
        }
      }
    }
  }
  rep.passed = rep.max_rel_error <= tol;
  return rep;
}

}  // namespace qstr::ndgrad
