#include "spil/tape.hpp"

#include <cmath>
#include <string>
#include <utility>

#include "spil/errors.hpp"

namespace spil::ad {
namespace {

// tanh saturates to exactly +-1 in double precision; keep the squashed
// output strictly inside the open action interval.
constexpr double kSquashLimit = 1.0 - 1e-12;

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ContractViolation(std::string("tape ") + op + ": shape mismatch");
  }
}

}  // namespace

Matrix affine_value(const Matrix& x, const Matrix& weight, const Matrix& bias) {
  Matrix y = x * weight.transpose();
  y.rowwise() += bias.row(0);
  return y;
}

Matrix relu_value(const Matrix& a) { return a.cwiseMax(0.0); }

Matrix squash_value(const Matrix& a, double mid, double half_range,
                    Matrix* t) {
  Matrix th = a.array().tanh().matrix();
  Matrix out =
      (mid + half_range * th.array().cwiseMax(-kSquashLimit).cwiseMin(
                              kSquashLimit))
          .matrix();
  if (t != nullptr) *t = std::move(th);
  return out;
}

Tape::Node Tape::make_node(Op op, std::vector<std::size_t> inputs,
                           Matrix value) {
  Node n;
  n.op = op;
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  return n;
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

bool Tape::any_grad(std::initializer_list<Var> vars) const {
  for (Var v : vars) {
    if (nodes_[v.id].requires_grad) return true;
  }
  return false;
}

Var Tape::constant(Matrix value) {
  Node n = make_node(Op::kConstant, {}, std::move(value));
  return push(std::move(n));
}

Var Tape::leaf(Matrix value) {
  Node n = make_node(Op::kLeaf, {}, std::move(value));
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
  require_same_shape(value(a), value(b), "add");
  Node n = make_node(Op::kAdd, {a.id, b.id}, value(a) + value(b));
  n.requires_grad = any_grad({a, b});
  return push(std::move(n));
}

Var Tape::sub(Var a, Var b) {
  require_same_shape(value(a), value(b), "sub");
  Node n = make_node(Op::kSub, {a.id, b.id}, value(a) - value(b));
  n.requires_grad = any_grad({a, b});
  return push(std::move(n));
}

Var Tape::scale(Var a, double factor) {
  Node n = make_node(Op::kScale, {a.id}, value(a) * factor);
  n.requires_grad = any_grad({a});
  n.p0 = factor;
  return push(std::move(n));
}

Var Tape::shift(Var a, double offset) {
  Node n = make_node(Op::kShift, {a.id}, (value(a).array() + offset).matrix());
  n.requires_grad = any_grad({a});
  return push(std::move(n));
}

Var Tape::mul(Var a, Var b) {
  require_same_shape(value(a), value(b), "mul");
  Node n = make_node(Op::kMul, {a.id, b.id}, value(a).cwiseProduct(value(b)));
  n.requires_grad = any_grad({a, b});
  return push(std::move(n));
}

Var Tape::affine(Var x, Var weight, Var bias) {
  const Matrix& xv = value(x);
  const Matrix& wv = value(weight);
  const Matrix& bv = value(bias);
  if (xv.cols() != wv.cols() || bv.rows() != 1 || bv.cols() != wv.rows()) {
    throw ContractViolation("tape affine: shape mismatch");
  }
  Node n = make_node(Op::kAffine, {x.id, weight.id, bias.id}, affine_value(xv, wv, bv));
  n.requires_grad = any_grad({x, weight, bias});
  return push(std::move(n));
}

Var Tape::relu(Var a) {
  Node n = make_node(Op::kRelu, {a.id}, relu_value(value(a)));
  n.requires_grad = any_grad({a});
  return push(std::move(n));
}

Var Tape::tanh(Var a) {
  Node n = make_node(Op::kTanh, {a.id}, value(a).array().tanh().matrix());
  n.requires_grad = any_grad({a});
  return push(std::move(n));
}

Var Tape::squash(Var a, double mid, double half_range) {
  Matrix t;
  Matrix out = squash_value(value(a), mid, half_range, &t);
  Node n = make_node(Op::kSquash, {a.id}, std::move(out));
  n.requires_grad = any_grad({a});
  n.p0 = mid;
  n.p1 = half_range;
  n.aux = std::move(t);
  return push(std::move(n));
}

Var Tape::phi(Var a, const SurrogateParams& sp) {
  const Matrix& av = value(a);
  Matrix out(av.rows(), av.cols());
  Matrix slope(av.rows(), av.cols());
  for (Eigen::Index j = 0; j < av.cols(); ++j) {
    for (Eigen::Index i = 0; i < av.rows(); ++i) {
      out(i, j) = spil::phi(av(i, j), sp);
      slope(i, j) = spil::phi_derivative(av(i, j), sp);
    }
  }
  Node n = make_node(Op::kPhi, {a.id}, std::move(out));
  n.requires_grad = any_grad({a});
  n.surrogate = sp;
  n.aux = std::move(slope);
  return push(std::move(n));
}

Var Tape::column(Var a, Eigen::Index col) {
  const Matrix& av = value(a);
  if (col < 0 || col >= av.cols()) {
    throw ContractViolation("tape column: index out of range");
  }
  Node n = make_node(Op::kColumn, {a.id}, av.col(col));
  n.requires_grad = any_grad({a});
  n.p0 = static_cast<double>(col);
  return push(std::move(n));
}

Var Tape::concat_cols(Var a, Var b) {
  const Matrix& av = value(a);
  const Matrix& bv = value(b);
  if (av.rows() != bv.rows()) {
    throw ContractViolation("tape concat_cols: row mismatch");
  }
  Matrix out(av.rows(), av.cols() + bv.cols());
  out << av, bv;
  Node n = make_node(Op::kConcat, {a.id, b.id}, std::move(out));
  n.requires_grad = any_grad({a, b});
  return push(std::move(n));
}

Var Tape::mean_rows(Var a) {
  const Matrix& av = value(a);
  if (av.cols() != 1 || av.rows() == 0) {
    throw ContractViolation("tape mean_rows: expects a non-empty column");
  }
  // Fixed left-to-right order so the result does not depend on Eigen's
  // reduction strategy.
  double sum = 0.0;
  for (Eigen::Index i = 0; i < av.rows(); ++i) sum += av(i, 0);
  Matrix out(1, 1);
  out(0, 0) = sum / static_cast<double>(av.rows());
  Node n = make_node(Op::kMeanRows, {a.id}, std::move(out));
  n.requires_grad = any_grad({a});
  return push(std::move(n));
}

Var Tape::custom(const std::vector<Var>& inputs, Matrix value,
                 CustomBackward backward) {
  Node n = make_node(Op::kCustom, {}, std::move(value));
  for (Var v : inputs) {
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
  }
  n.custom = std::move(backward);
  return push(std::move(n));
}

double Tape::scalar(Var v) const {
  const Matrix& m = value(v);
  if (m.rows() != 1 || m.cols() != 1) {
    throw ContractViolation("tape scalar: node is not 1x1");
  }
  return m(0, 0);
}

Matrix Tape::adjoint(Var v) const {
  if (v.id < adjoints_.size() && adjoints_[v.id].size() > 0) {
    return adjoints_[v.id];
  }
  const Matrix& val = value(v);
  return Matrix::Zero(val.rows(), val.cols());
}

Matrix& Tape::adjoint_ref(std::size_t id) {
  Matrix& adj = adjoints_[id];
  if (adj.size() == 0) {
    adj = Matrix::Zero(nodes_[id].value.rows(), nodes_[id].value.cols());
  }
  return adj;
}

void Tape::backward(Var output, double seed) {
  const Matrix& out = value(output);
  if (out.rows() != 1 || out.cols() != 1) {
    throw ContractViolation("backward: seed node must be a 1x1 scalar");
  }
  adjoints_.assign(nodes_.size(), Matrix());
  adjoints_[output.id] = Matrix::Constant(1, 1, seed);
  for (std::size_t id = output.id + 1; id-- > 0;) {
    if (adjoints_[id].size() == 0 || !nodes_[id].requires_grad) continue;
    propagate(id);
  }
}

void Tape::propagate(std::size_t id) {
  const Node& n = nodes_[id];
  const Matrix& g = adjoints_[id];
  auto wants = [&](std::size_t k) {
    return nodes_[n.inputs[k]].requires_grad;
  };
  switch (n.op) {
    case Op::kConstant:
    case Op::kLeaf:
      break;
    case Op::kAdd:
      if (wants(0)) adjoint_ref(n.inputs[0]) += g;
      if (wants(1)) adjoint_ref(n.inputs[1]) += g;
      break;
    case Op::kSub:
      if (wants(0)) adjoint_ref(n.inputs[0]) += g;
      if (wants(1)) adjoint_ref(n.inputs[1]) -= g;
      break;
    case Op::kScale:
      adjoint_ref(n.inputs[0]) += n.p0 * g;
      break;
    case Op::kShift:
      adjoint_ref(n.inputs[0]) += g;
      break;
    case Op::kMul:
      if (wants(0)) {
        adjoint_ref(n.inputs[0]) += g.cwiseProduct(nodes_[n.inputs[1]].value);
      }
      if (wants(1)) {
        adjoint_ref(n.inputs[1]) += g.cwiseProduct(nodes_[n.inputs[0]].value);
      }
      break;
    case Op::kAffine: {
      const Matrix& x = nodes_[n.inputs[0]].value;
      const Matrix& w = nodes_[n.inputs[1]].value;
      if (wants(0)) adjoint_ref(n.inputs[0]).noalias() += g * w;
      if (wants(1)) adjoint_ref(n.inputs[1]).noalias() += g.transpose() * x;
      if (wants(2)) adjoint_ref(n.inputs[2]) += g.colwise().sum();
      break;
    }
    case Op::kRelu:
      // Subgradient 0 at the kink.
      adjoint_ref(n.inputs[0]) +=
          (n.value.array() > 0.0).select(g.array(), 0.0).matrix();
      break;
    case Op::kTanh:
      adjoint_ref(n.inputs[0]) +=
          g.cwiseProduct((1.0 - n.value.array().square()).matrix());
      break;
    case Op::kSquash:
      adjoint_ref(n.inputs[0]) +=
          (n.p1 * g.array() * (1.0 - n.aux.array().square())).matrix();
      break;
    case Op::kPhi:
      adjoint_ref(n.inputs[0]) += g.cwiseProduct(n.aux);
      break;
    case Op::kColumn:
      adjoint_ref(n.inputs[0]).col(static_cast<Eigen::Index>(n.p0)) += g;
      break;
    case Op::kConcat: {
      const Eigen::Index left = nodes_[n.inputs[0]].value.cols();
      const Eigen::Index right = nodes_[n.inputs[1]].value.cols();
      if (wants(0)) adjoint_ref(n.inputs[0]) += g.leftCols(left);
      if (wants(1)) adjoint_ref(n.inputs[1]) += g.rightCols(right);
      break;
    }
    case Op::kMeanRows: {
      const Matrix& a = nodes_[n.inputs[0]].value;
      adjoint_ref(n.inputs[0]).array() +=
          g(0, 0) / static_cast<double>(a.rows());
      break;
    }
    case Op::kCustom: {
      std::vector<Matrix*> targets;
      targets.reserve(n.inputs.size());
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        targets.push_back(wants(k) ? &adjoint_ref(n.inputs[k]) : nullptr);
      }
      n.custom(g, targets);
      break;
    }
  }
}

}  // namespace spil::ad
