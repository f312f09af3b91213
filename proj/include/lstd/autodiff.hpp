#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lstd/common.hpp"

namespace lstd::ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; invalidated by Tape::clear().
struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

enum class Op : std::uint8_t {
  kConst,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kMatMul,
  kTranspose,
  kAddScalar,
  kMulScalar,
  kExp,
  kLog,
  kTanh,
  kSqrt,
  kAbs,
  kSquare,
  kLeakyRelu,
  kClamp,
  kSliceRows,
  kSliceCols,
  kPadRows,
  kPadCols,
  kConcatRows,
  kConcatCols,
  kSum,
  kMean,
  kRowSum,
  kColSum,
  kBroadcastScalar,
  kBroadcastCol,
  kBroadcastRow,
};

/// Reverse-mode tape over dense double matrices.
///
/// The differentiating property of this engine is that gradients() emits its
/// adjoint computations as ordinary tape nodes, so a gradient is itself a Var
/// that can be combined into losses and differentiated again. Losses built
/// here contain Jacobian log-determinants and cross-step sensitivities whose
/// parameter gradients are second-order quantities; they fall out of repeated
/// backward passes with no special casing.
///
/// Nodes are appended in topological order (inputs always precede consumers),
/// which gradients() relies on when sweeping ids in descending order.
class Tape {
 public:
  Var constant(Matrix v);
  Var zeros(Index rows, Index cols) { return constant(Matrix::Zero(rows, cols)); }
  Var scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

  const Matrix& val(Var v) const;
  double scalar_val(Var v) const;
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);  // elementwise
  Var div(Var a, Var b);  // elementwise
  Var neg(Var a);
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var add_scalar(Var a, double s);
  Var mul_scalar(Var a, double s);
  Var exp(Var a);
  Var log(Var a);
  Var tanh(Var a);
  Var sqrt(Var a);
  Var abs(Var a);
  Var square(Var a);
  Var leaky_relu(Var a, double slope);
  Var clamp(Var a, double lo, double hi);
  Var slice_rows(Var a, Index first, Index count);
  Var slice_cols(Var a, Index first, Index count);
  Var pad_rows(Var a, Index first, Index total);  // embed into zero block
  Var pad_cols(Var a, Index first, Index total);
  Var concat_rows(Var a, Var b);
  Var concat_cols(Var a, Var b);
  Var sum(Var a);   // 1x1
  Var mean(Var a);  // 1x1
  Var row_sum(Var a);
  Var col_sum(Var a);
  Var broadcast_scalar(Var a, Index rows, Index cols);
  Var broadcast_col(Var a, Index cols);  // Tx1 -> TxC
  Var broadcast_row(Var a, Index rows);  // 1xC -> RxC

  /// 1x1 view of a single entry.
  Var entry(Var a, Index r, Index c);

  /// Row-wise softmax, shifted by the row max (exact; softmax is shift
  /// invariant) so large dot products do not overflow.
  Var softmax_rows(Var a);

  /// Elementwise log N(x; 0, 1).
  Var std_normal_logpdf(Var x);

  /// Adjoints of scalar `out` (must be 1x1) with respect to each of `wrt`.
  /// The adjoints are tape nodes, so the result is differentiable again.
  /// Nodes with no path to `out` get a zero matrix of their shape.
  std::vector<Var> gradients(Var out, std::span<const Var> wrt);
  Var gradient(Var out, Var wrt);

 private:
  struct Node {
    Op op;
    std::int32_t a = -1;
    std::int32_t b = -1;
    double s0 = 0.0;
    double s1 = 0.0;
    Index i0 = 0;
    Index i1 = 0;
    Matrix value;
  };

  Var push(Node n);
  const Node& node(Var v) const;
  void check(Var v) const;

  std::vector<Node> nodes_;
};

/// Central finite difference of f at x with step h, elementwise. Test oracle
/// helper; lives here so every test target shares one implementation.
template <typename F>
Matrix finite_difference(F&& f, Matrix x, double h = 1e-4) {
  Matrix g(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    for (Index c = 0; c < x.cols(); ++c) {
      const double keep = x(r, c);
      x(r, c) = keep + h;
      const double up = f(x);
      x(r, c) = keep - h;
      const double dn = f(x);
      x(r, c) = keep;
      g(r, c) = (up - dn) / (2.0 * h);
    }
  }
  return g;
}

}  // namespace lstd::ad
