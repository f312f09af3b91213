#include "lstd/autodiff.hpp"

#include <cmath>
#include <limits>

namespace lstd::ad {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454836;  // log(2*pi)
constexpr double kSqrtFloor = 1e-30;                  // sqrt backward denominator floor

}  // namespace

Var Tape::push(Node n) {
  const auto id = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back(std::move(n));
  return Var{id};
}

void Tape::check(Var v) const {
  if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
    throw ValueError("autodiff: variable does not belong to this tape");
}

const Tape::Node& Tape::node(Var v) const {
  check(v);
  return nodes_[static_cast<std::size_t>(v.id)];
}

const Matrix& Tape::val(Var v) const { return node(v).value; }

double Tape::scalar_val(Var v) const {
  const Matrix& m = val(v);
  require(m.rows() == 1 && m.cols() == 1, "autodiff: expected a 1x1 value");
  return m(0, 0);
}

Var Tape::constant(Matrix v) {
  Node n;
  n.op = Op::kConst;
  n.value = std::move(v);
  return push(n);
}

namespace {
void same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ValueError(std::string("autodiff: shape mismatch in ") + what);
}
}  // namespace

Var Tape::add(Var a, Var b) {
  const Matrix& av = val(a);
  const Matrix& bv = val(b);
  same_shape(av, bv, "add");
  Node n;
  n.op = Op::kAdd;
  n.a = a.id;
  n.b = b.id;
  n.value = av + bv;
  return push(n);
}

Var Tape::sub(Var a, Var b) {
  const Matrix& av = val(a);
  const Matrix& bv = val(b);
  same_shape(av, bv, "sub");
  Node n;
  n.op = Op::kSub;
  n.a = a.id;
  n.b = b.id;
  n.value = av - bv;
  return push(n);
}

Var Tape::mul(Var a, Var b) {
  const Matrix& av = val(a);
  const Matrix& bv = val(b);
  same_shape(av, bv, "mul");
  Node n;
  n.op = Op::kMul;
  n.a = a.id;
  n.b = b.id;
  n.value = av.cwiseProduct(bv);
  return push(n);
}

Var Tape::div(Var a, Var b) {
  const Matrix& av = val(a);
  const Matrix& bv = val(b);
  same_shape(av, bv, "div");
  Node n;
  n.op = Op::kDiv;
  n.a = a.id;
  n.b = b.id;
  n.value = av.cwiseQuotient(bv);
  return push(n);
}

Var Tape::neg(Var a) {
  Node n;
  n.op = Op::kNeg;
  n.a = a.id;
  n.value = -val(a);
  return push(n);
}

Var Tape::matmul(Var a, Var b) {
  const Matrix& av = val(a);
  const Matrix& bv = val(b);
  if (av.cols() != bv.rows()) throw ValueError("autodiff: inner dimensions differ in matmul");
  Node n;
  n.op = Op::kMatMul;
  n.a = a.id;
  n.b = b.id;
  n.value = av * bv;
  return push(n);
}

Var Tape::transpose(Var a) {
  Node n;
  n.op = Op::kTranspose;
  n.a = a.id;
  n.value = val(a).transpose();
  return push(n);
}

Var Tape::add_scalar(Var a, double s) {
  Node n;
  n.op = Op::kAddScalar;
  n.a = a.id;
  n.s0 = s;
  n.value = val(a).array() + s;
  return push(n);
}

Var Tape::mul_scalar(Var a, double s) {
  Node n;
  n.op = Op::kMulScalar;
  n.a = a.id;
  n.s0 = s;
  n.value = val(a) * s;
  return push(n);
}

Var Tape::exp(Var a) {
  Node n;
  n.op = Op::kExp;
  n.a = a.id;
  n.value = val(a).array().exp();
  return push(n);
}

Var Tape::log(Var a) {
  Node n;
  n.op = Op::kLog;
  n.a = a.id;
  n.value = val(a).array().log();
  return push(n);
}

Var Tape::tanh(Var a) {
  Node n;
  n.op = Op::kTanh;
  n.a = a.id;
  n.value = val(a).array().tanh();
  return push(n);
}

Var Tape::sqrt(Var a) {
  Node n;
  n.op = Op::kSqrt;
  n.a = a.id;
  n.value = val(a).array().sqrt();
  return push(n);
}

Var Tape::abs(Var a) {
  Node n;
  n.op = Op::kAbs;
  n.a = a.id;
  n.value = val(a).array().abs();
  return push(n);
}

Var Tape::square(Var a) {
  Node n;
  n.op = Op::kSquare;
  n.a = a.id;
  n.value = val(a).array().square();
  return push(n);
}

Var Tape::leaky_relu(Var a, double slope) {
  const Matrix& av = val(a);
  Node n;
  n.op = Op::kLeakyRelu;
  n.a = a.id;
  n.s0 = slope;
  n.value = av.array().max(0.0) + slope * av.array().min(0.0);
  return push(n);
}

Var Tape::clamp(Var a, double lo, double hi) {
  require(lo <= hi, "autodiff: clamp bounds out of order");
  Node n;
  n.op = Op::kClamp;
  n.a = a.id;
  n.s0 = lo;
  n.s1 = hi;
  n.value = val(a).array().max(lo).min(hi);
  return push(n);
}

Var Tape::slice_rows(Var a, Index first, Index count) {
  const Matrix& av = val(a);
  require(first >= 0 && count >= 0 && first + count <= av.rows(),
          "autodiff: row slice out of range");
  Node n;
  n.op = Op::kSliceRows;
  n.a = a.id;
  n.i0 = first;
  n.i1 = count;
  n.value = av.middleRows(first, count);
  return push(n);
}

Var Tape::slice_cols(Var a, Index first, Index count) {
  const Matrix& av = val(a);
  require(first >= 0 && count >= 0 && first + count <= av.cols(),
          "autodiff: column slice out of range");
  Node n;
  n.op = Op::kSliceCols;
  n.a = a.id;
  n.i0 = first;
  n.i1 = count;
  n.value = av.middleCols(first, count);
  return push(n);
}

Var Tape::pad_rows(Var a, Index first, Index total) {
  const Matrix& av = val(a);
  require(first >= 0 && first + av.rows() <= total, "autodiff: row pad out of range");
  Node n;
  n.op = Op::kPadRows;
  n.a = a.id;
  n.i0 = first;
  n.i1 = total;
  n.value = Matrix::Zero(total, av.cols());
  n.value.middleRows(first, av.rows()) = av;
  return push(n);
}

Var Tape::pad_cols(Var a, Index first, Index total) {
  const Matrix& av = val(a);
  require(first >= 0 && first + av.cols() <= total, "autodiff: column pad out of range");
  Node n;
  n.op = Op::kPadCols;
  n.a = a.id;
  n.i0 = first;
  n.i1 = total;
  n.value = Matrix::Zero(av.rows(), total);
  n.value.middleCols(first, av.cols()) = av;
  return push(n);
}

Var Tape::concat_rows(Var a, Var b) {
  const Matrix& av = val(a);
  const Matrix& bv = val(b);
  require(av.cols() == bv.cols(), "autodiff: column counts differ in concat_rows");
  Node n;
  n.op = Op::kConcatRows;
  n.a = a.id;
  n.b = b.id;
  n.value.resize(av.rows() + bv.rows(), av.cols());
  n.value << av, bv;
  return push(n);
}

Var Tape::concat_cols(Var a, Var b) {
  const Matrix& av = val(a);
  const Matrix& bv = val(b);
  require(av.rows() == bv.rows(), "autodiff: row counts differ in concat_cols");
  Node n;
  n.op = Op::kConcatCols;
  n.a = a.id;
  n.b = b.id;
  n.value.resize(av.rows(), av.cols() + bv.cols());
  n.value << av, bv;
  return push(n);
}

Var Tape::sum(Var a) {
  Node n;
  n.op = Op::kSum;
  n.a = a.id;
  n.value = Matrix::Constant(1, 1, val(a).sum());
  return push(n);
}

Var Tape::mean(Var a) {
  Node n;
  n.op = Op::kMean;
  n.a = a.id;
  n.value = Matrix::Constant(1, 1, val(a).mean());
  return push(n);
}

Var Tape::row_sum(Var a) {
  Node n;
  n.op = Op::kRowSum;
  n.a = a.id;
  n.value = val(a).rowwise().sum();
  return push(n);
}

Var Tape::col_sum(Var a) {
  Node n;
  n.op = Op::kColSum;
  n.a = a.id;
  n.value = val(a).colwise().sum();
  return push(n);
}

Var Tape::broadcast_scalar(Var a, Index rows, Index cols) {
  Node n;
  n.op = Op::kBroadcastScalar;
  n.a = a.id;
  n.value = Matrix::Constant(rows, cols, scalar_val(a));
  return push(n);
}

Var Tape::broadcast_col(Var a, Index cols) {
  const Matrix& av = val(a);
  require(av.cols() == 1, "autodiff: broadcast_col expects a column vector");
  Node n;
  n.op = Op::kBroadcastCol;
  n.a = a.id;
  n.value = av.replicate(1, cols);
  return push(n);
}

Var Tape::broadcast_row(Var a, Index rows) {
  const Matrix& av = val(a);
  require(av.rows() == 1, "autodiff: broadcast_row expects a row vector");
  Node n;
  n.op = Op::kBroadcastRow;
  n.a = a.id;
  n.value = av.replicate(rows, 1);
  return push(n);
}

Var Tape::entry(Var a, Index r, Index c) {
  return slice_cols(slice_rows(a, r, 1), c, 1);
}

Var Tape::softmax_rows(Var a) {
  const Index cols = val(a).cols();  // copy before pushes invalidate references
  // Row-max shift is a value-level constant; softmax is exactly shift
  // invariant per row, so gradients are unaffected.
  Matrix shift = val(a).rowwise().maxCoeff();
  Var z = sub(a, broadcast_col(constant(shift), cols));
  Var e = exp(z);
  Var s = row_sum(e);
  return div(e, broadcast_col(s, cols));
}

Var Tape::std_normal_logpdf(Var x) {
  return add_scalar(mul_scalar(square(x), -0.5), -0.5 * kLogTwoPi);
}

Var Tape::gradient(Var out, Var wrt) {
  const Var w[] = {wrt};
  return gradients(out, w)[0];
}

std::vector<Var> Tape::gradients(Var out, std::span<const Var> wrt) {
  check(out);
  for (Var w : wrt) check(w);
  {
    const Matrix& ov = val(out);
    require(ov.rows() == 1 && ov.cols() == 1, "autodiff: gradients source must be 1x1");
  }

  const std::int32_t top = out.id;
  // Adjoint node id per original node; only nodes at or below `top` can lie on
  // a path to `out`, so backward-pass nodes never need entries here.
  std::vector<std::int32_t> adj(static_cast<std::size_t>(top) + 1, -1);
  adj[static_cast<std::size_t>(top)] = constant(Matrix::Ones(1, 1)).id;

  auto accumulate = [&](std::int32_t target, Var grad) {
    if (target < 0) return;
    auto& slot = adj[static_cast<std::size_t>(target)];
    slot = slot < 0 ? grad.id : add(Var{slot}, grad).id;
  };

  // Plain-data snapshot of a node; pushing new nodes may reallocate nodes_.
  struct Meta {
    Op op;
    std::int32_t a, b;
    double s0, s1;
    Index i0, i1;
    Index ar, ac, br, bc;
  };
  auto meta_of = [&](std::int32_t id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    Meta m{n.op, n.a, n.b, n.s0, n.s1, n.i0, n.i1, 0, 0, 0, 0};
    if (n.a >= 0) {
      const Matrix& av = nodes_[static_cast<std::size_t>(n.a)].value;
      m.ar = av.rows();
      m.ac = av.cols();
    }
    if (n.b >= 0) {
      const Matrix& bv = nodes_[static_cast<std::size_t>(n.b)].value;
      m.br = bv.rows();
      m.bc = bv.cols();
    }
    return m;
  };

  for (std::int32_t id = top; id >= 0; --id) {
    const std::int32_t gid = adj[static_cast<std::size_t>(id)];
    if (gid < 0) continue;
    const Meta m = meta_of(id);
    if (m.op == Op::kConst) continue;
    const Var g{gid};
    const Var va{m.a};
    const Var vb{m.b};
    const Var y{id};

    switch (m.op) {
      case Op::kAdd:
        accumulate(m.a, g);
        accumulate(m.b, g);
        break;
      case Op::kSub:
        accumulate(m.a, g);
        accumulate(m.b, neg(g));
        break;
      case Op::kMul:
        accumulate(m.a, mul(g, vb));
        accumulate(m.b, mul(g, va));
        break;
      case Op::kDiv:
        accumulate(m.a, div(g, vb));
        accumulate(m.b, neg(mul(g, div(y, vb))));
        break;
      case Op::kNeg:
        accumulate(m.a, neg(g));
        break;
      case Op::kMatMul:
        accumulate(m.a, matmul(g, transpose(vb)));
        accumulate(m.b, matmul(transpose(va), g));
        break;
      case Op::kTranspose:
        accumulate(m.a, transpose(g));
        break;
      case Op::kAddScalar:
        accumulate(m.a, g);
        break;
      case Op::kMulScalar:
        accumulate(m.a, mul_scalar(g, m.s0));
        break;
      case Op::kExp:
        accumulate(m.a, mul(g, y));
        break;
      case Op::kLog:
        accumulate(m.a, div(g, va));
        break;
      case Op::kTanh:
        accumulate(m.a, mul(g, add_scalar(neg(square(y)), 1.0)));
        break;
      case Op::kSqrt:
        // Floor keeps the constraint terms defined at an exact zero (their
        // sum-of-squares path contributes 0 there); exact whenever y > floor.
        accumulate(m.a, div(mul_scalar(g, 0.5),
                            clamp(y, kSqrtFloor, std::numeric_limits<double>::infinity())));
        break;
      case Op::kAbs: {
        Matrix sign = nodes_[static_cast<std::size_t>(m.a)].value.array().sign();
        accumulate(m.a, mul(g, constant(std::move(sign))));
        break;
      }
      case Op::kSquare:
        accumulate(m.a, mul(g, mul_scalar(va, 2.0)));
        break;
      case Op::kLeakyRelu: {
        const Matrix& av = nodes_[static_cast<std::size_t>(m.a)].value;
        Matrix mask = (av.array() >= 0.0).select(Matrix::Ones(m.ar, m.ac), Matrix::Constant(m.ar, m.ac, m.s0));
        accumulate(m.a, mul(g, constant(std::move(mask))));
        break;
      }
      case Op::kClamp: {
        const Matrix& av = nodes_[static_cast<std::size_t>(m.a)].value;
        Matrix mask = ((av.array() >= m.s0) && (av.array() <= m.s1))
                          .select(Matrix::Ones(m.ar, m.ac), Matrix::Zero(m.ar, m.ac));
        accumulate(m.a, mul(g, constant(std::move(mask))));
        break;
      }
      case Op::kSliceRows:
        accumulate(m.a, pad_rows(g, m.i0, m.ar));
        break;
      case Op::kSliceCols:
        accumulate(m.a, pad_cols(g, m.i0, m.ac));
        break;
      case Op::kPadRows:
        accumulate(m.a, slice_rows(g, m.i0, m.ar));
        break;
      case Op::kPadCols:
        accumulate(m.a, slice_cols(g, m.i0, m.ac));
        break;
      case Op::kConcatRows:
        accumulate(m.a, slice_rows(g, 0, m.ar));
        accumulate(m.b, slice_rows(g, m.ar, m.br));
        break;
      case Op::kConcatCols:
        accumulate(m.a, slice_cols(g, 0, m.ac));
        accumulate(m.b, slice_cols(g, m.ac, m.bc));
        break;
      case Op::kSum:
        accumulate(m.a, broadcast_scalar(g, m.ar, m.ac));
        break;
      case Op::kMean:
        accumulate(m.a, mul_scalar(broadcast_scalar(g, m.ar, m.ac),
                                   1.0 / static_cast<double>(m.ar * m.ac)));
        break;
      case Op::kRowSum:
        accumulate(m.a, broadcast_col(g, m.ac));
        break;
      case Op::kColSum:
        accumulate(m.a, broadcast_row(g, m.ar));
        break;
      case Op::kBroadcastScalar:
        accumulate(m.a, sum(g));
        break;
      case Op::kBroadcastCol:
        accumulate(m.a, row_sum(g));
        break;
      case Op::kBroadcastRow:
        accumulate(m.a, col_sum(g));
        break;
      case Op::kConst:
        break;
    }
  }

  std::vector<Var> out_grads;
  out_grads.reserve(wrt.size());
  for (Var w : wrt) {
    const std::int32_t gid = w.id <= top ? adj[static_cast<std::size_t>(w.id)] : -1;
    if (gid >= 0) {
      out_grads.push_back(Var{gid});
    } else {
      const Matrix& wv = val(w);
      out_grads.push_back(zeros(wv.rows(), wv.cols()));
    }
  }
  return out_grads;
}

}  // namespace lstd::ad
