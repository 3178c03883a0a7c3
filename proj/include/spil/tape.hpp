#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <functional>
#include <vector>

#include "spil/surrogate.hpp"

namespace spil::ad {

using Matrix = Eigen::MatrixXd;

/// Handle to a node recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

/// Reverse-mode differentiation over batched matrices.
///
/// Every node holds a (batch x width) matrix. The forward value is computed
/// when the node is recorded; backward() replays the record in reverse and
/// accumulates adjoints. Nodes built only from constants are marked as not
/// requiring gradients and are skipped by the reverse sweep.
///
/// Primitive set: affine map, ReLU, tanh (and its bounded-squash variant),
/// elementwise product/sum/scale, column slicing and concatenation, batch
/// mean, and phi. Model-specific kernels use custom().
class Tape {
 public:
  /// Backward rule for custom nodes: given the output adjoint, add into the
  /// adjoints of the inputs. Null pointers mark inputs without gradient.
  using CustomBackward = std::function<void(
      const Matrix& out_adjoint, const std::vector<Matrix*>& in_adjoints)>;

  Var constant(Matrix value);
  /// Differentiable leaf (network parameters).
  Var leaf(Matrix value);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var scale(Var a, double factor);
  Var shift(Var a, double offset);
  Var mul(Var a, Var b);
  /// x (B x in) * weight^T (in -> out) + bias (1 x out) broadcast over rows.
  Var affine(Var x, Var weight, Var bias);
  Var relu(Var a);
  Var tanh(Var a);
  /// mid + half_range * tanh(a), clamped strictly inside the open interval.
  Var squash(Var a, double mid, double half_range);
  Var phi(Var a, const SurrogateParams& sp);
  Var column(Var a, Eigen::Index col);
  Var concat_cols(Var a, Var b);
  /// (B x 1) -> (1 x 1) arithmetic mean over rows.
  Var mean_rows(Var a);
  Var custom(const std::vector<Var>& inputs, Matrix value,
             CustomBackward backward);

  [[nodiscard]] const Matrix& value(Var v) const { return nodes_[v.id].value; }
  [[nodiscard]] double scalar(Var v) const;
  /// Adjoint after the last backward(); zero matrix if the node got none.
  [[nodiscard]] Matrix adjoint(Var v) const;
  [[nodiscard]] bool requires_grad(Var v) const {
    return nodes_[v.id].requires_grad;
  }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a 1x1 output seeded with `seed`. Clears adjoints of
  /// any previous sweep first. Throws ContractViolation for non-scalar output.
  void backward(Var output, double seed = 1.0);

 private:
  enum class Op {
    kConstant,
    kLeaf,
    kAdd,
    kSub,
    kScale,
    kShift,
    kMul,
    kAffine,
    kRelu,
    kTanh,
    kSquash,
    kPhi,
    kColumn,
    kConcat,
    kMeanRows,
    kCustom,
  };

  struct Node {
    Op op = Op::kConstant;
    std::vector<std::size_t> inputs;
    Matrix value;
    bool requires_grad = false;
    double p0 = 0.0;  // op parameter (scale factor, mid, column index ...)
    double p1 = 0.0;
    Matrix aux;  // cached forward quantity (tanh output, phi slope ...)
    SurrogateParams surrogate;
    CustomBackward custom;
  };

  static Node make_node(Op op, std::vector<std::size_t> inputs, Matrix value);
  Var push(Node node);
  bool any_grad(std::initializer_list<Var> vars) const;
  Matrix& adjoint_ref(std::size_t id);
  void propagate(std::size_t id);

  std::vector<Node> nodes_;
  std::vector<Matrix> adjoints_;
};

}  // namespace spil::ad

namespace spil::ad {

// Forward kernels shared by the tape and the gradient-free batched paths, so
// both produce identical values.
Matrix affine_value(const Matrix& x, const Matrix& weight, const Matrix& bias);
Matrix relu_value(const Matrix& a);
/// Returns the squashed value; `t` receives tanh(a) (unclamped).
Matrix squash_value(const Matrix& a, double mid, double half_range,
                    Matrix* t = nullptr);

}  // namespace spil::ad
