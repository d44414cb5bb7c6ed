#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dannte/tensor.hpp"

namespace dannte {

enum class OpKind {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kNeg,
  kTanh,
  kSigmoid,
  kLog,
  kClamp,
  kGradScale,
  kMatMul,
  kMatMulT,
  kAddRowwise,
  kReduceMean,
  kReduceSum,
  kReshape,
};

/// Recorded forward graph. Nodes are appended in evaluation order, so the
/// list is topologically sorted by construction; backward() is a single
/// reverse sweep with summed accumulation, deterministic node by node.
template <typename Scalar>
class TapeT {
 public:
  using Array = ArrayX<Scalar>;
  using Tensor = TensorT<Scalar>;

  /// Registers a leaf the caller wants gradients for.
  Tensor variable(const Tensor& t) { return make_leaf(t); }

  Index size() const { return static_cast<Index>(nodes_.size()); }
  std::size_t backward_calls() const { return backward_calls_; }

  /// Reverse sweep from a scalar loss; seeds d(loss)/d(loss) = 1 and sums
  /// gradient contributions along every path. Unreached nodes read as zero.
  void backward(const Tensor& loss) {
    if (loss.tape() != this)
      throw ContractError("backward: loss does not belong to this tape");
    if (loss.numel() != 1)
      throw ContractError("backward: loss must be scalar, got shape " +
                          shape_str(loss.shape()));
    grads_.assign(nodes_.size(), Array());
    grad_buf(loss.node()).setConstant(Scalar(1));
    for (int i = loss.node(); i >= 0; --i) {
      if (grads_[static_cast<std::size_t>(i)].size() == 0) continue;
      pull_through(i);
    }
    swept_ = true;
    ++backward_calls_;
  }

  /// Gradient of the last backward() w.r.t. the tensor's node.
  Tensor grad(const Tensor& t) {
    if (t.tape() != this)
      throw ContractError("grad: tensor does not belong to this tape");
    if (!swept_) throw ContractError("grad: backward() has not run");
    return Tensor(t.shape(), grad_buf(t.node()));
  }

  // -- recording ------------------------------------------------------------

  Tensor record1(OpKind kind, const Tensor& a, Shape out_shape, Array out,
                 Scalar aux0 = 0, Scalar aux1 = 0) {
    int ia = intern(a);
    return push(kind, ia, -1, std::move(out_shape), std::move(out), aux0, aux1);
  }

  Tensor record2(OpKind kind, const Tensor& a, const Tensor& b, Shape out_shape,
                 Array out) {
    int ia = intern(a);
    int ib = intern(b);
    return push(kind, ia, ib, std::move(out_shape), std::move(out), 0, 0);
  }

  /// Tape shared by the operands, or null when all are constants. Mixing
  /// tensors from two live tapes is a caller error.
  static TapeT* owner(const Tensor& a) { return a.tape(); }
  static TapeT* owner(const Tensor& a, const Tensor& b) {
    TapeT* ta = a.tape();
    TapeT* tb = b.tape();
    if (ta && tb && ta != tb)
      throw ContractError("operands belong to different tapes");
    return ta ? ta : tb;
  }

 private:
  struct Node {
    OpKind kind;
    int a = -1;
    int b = -1;
    Shape shape;
    std::shared_ptr<const Array> value;
    Scalar aux0 = 0;
    Scalar aux1 = 0;
  };

  Tensor make_leaf(const Tensor& t) {
    nodes_.push_back(Node{OpKind::kLeaf, -1, -1, t.shape(), t.values_ptr()});
    return Tensor(t.shape(), t.values_ptr(), this,
                  static_cast<int>(nodes_.size()) - 1);
  }

  int intern(const Tensor& t) {
    if (t.tape() == this) return t.node();
    if (t.tape() != nullptr)
      throw ContractError("operand belongs to a different tape");
    return make_leaf(t).node();
  }

  Tensor push(OpKind kind, int a, int b, Shape shape, Array out, Scalar aux0,
              Scalar aux1) {
    auto holder = std::make_shared<Array>(std::move(out));
    nodes_.push_back(Node{kind, a, b, shape, holder, aux0, aux1});
    return Tensor(std::move(shape), holder, this,
                  static_cast<int>(nodes_.size()) - 1);
  }

  Array& grad_buf(int i) {
    Array& g = grads_[static_cast<std::size_t>(i)];
    if (g.size() == 0) g = Array::Zero(nodes_[static_cast<std::size_t>(i)].value->size());
    return g;
  }

  const Array& val(int i) const { return *nodes_[static_cast<std::size_t>(i)].value; }
  Index node_rows(int i) const { return nodes_[static_cast<std::size_t>(i)].shape[0]; }
  Index node_cols(int i) const { return nodes_[static_cast<std::size_t>(i)].shape[1]; }
  bool node_scalar(int i) const { return nodes_[static_cast<std::size_t>(i)].value->size() == 1; }

  using RowMat = RowMajorMatrix<Scalar>;
  using MapMat = Eigen::Map<RowMat>;
  using CMapMat = Eigen::Map<const RowMat>;

  void pull_through(int i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    const Array& g = grads_[static_cast<std::size_t>(i)];
    switch (n.kind) {
      case OpKind::kLeaf:
        break;
      case OpKind::kAdd: {
        accumulate(n.a, g, /*negate=*/false);
        accumulate(n.b, g, /*negate=*/false);
        break;
      }
      case OpKind::kSub: {
        accumulate(n.a, g, /*negate=*/false);
        accumulate(n.b, g, /*negate=*/true);
        break;
      }
      case OpKind::kMul: {
        // d(a*b) = g*b into a, g*a into b; a scalar factor collapses to a sum.
        if (node_scalar(n.a) && !node_scalar(n.b)) {
          grad_buf(n.a)[0] += (g * val(n.b)).sum();
          grad_buf(n.b) += g * val(n.a)[0];
        } else if (node_scalar(n.b) && !node_scalar(n.a)) {
          grad_buf(n.b)[0] += (g * val(n.a)).sum();
          grad_buf(n.a) += g * val(n.b)[0];
        } else {
          grad_buf(n.a) += g * val(n.b);
          grad_buf(n.b) += g * val(n.a);
        }
        break;
      }
      case OpKind::kNeg:
        grad_buf(n.a) -= g;
        break;
      case OpKind::kTanh:
        grad_buf(n.a) += g * (Scalar(1) - n.value->square());
        break;
      case OpKind::kSigmoid:
        grad_buf(n.a) += g * (*n.value) * (Scalar(1) - *n.value);
        break;
      case OpKind::kLog:
        grad_buf(n.a) += g / val(n.a);
        break;
      case OpKind::kClamp: {
        const Array& x = val(n.a);
        grad_buf(n.a) +=
            g * ((x >= n.aux0 && x <= n.aux1).template cast<Scalar>());
        break;
      }
      case OpKind::kGradScale:
        grad_buf(n.a) += g * n.aux0;
        break;
      case OpKind::kMatMul: {
        const Index m = n.shape[0], p = n.shape[1], k = node_cols(n.a);
        CMapMat G(g.data(), m, p), A(val(n.a).data(), m, k), B(val(n.b).data(), k, p);
        MapMat dA(grad_buf(n.a).data(), m, k);
        dA.noalias() += G * B.transpose();
        MapMat dB(grad_buf(n.b).data(), k, p);
        dB.noalias() += A.transpose() * G;
        break;
      }
      case OpKind::kMatMulT: {
        // out = A * B^T with A [m,k], B [p,k]
        const Index m = n.shape[0], p = n.shape[1], k = node_cols(n.a);
        CMapMat G(g.data(), m, p), A(val(n.a).data(), m, k), B(val(n.b).data(), p, k);
        MapMat dA(grad_buf(n.a).data(), m, k);
        dA.noalias() += G * B;
        MapMat dB(grad_buf(n.b).data(), p, k);
        dB.noalias() += G.transpose() * A;
        break;
      }
      case OpKind::kAddRowwise: {
        const Index m = n.shape[0], c = n.shape[1];
        grad_buf(n.a) += g;
        CMapMat G(g.data(), m, c);
        grad_buf(n.b) += G.colwise().sum().array().transpose();
        break;
      }
      case OpKind::kReduceMean:
        grad_buf(n.a) += g[0] / Scalar(val(n.a).size());
        break;
      case OpKind::kReduceSum:
        grad_buf(n.a) += g[0];
        break;
      case OpKind::kReshape:
        grad_buf(n.a) += g;
        break;
    }
  }

  void accumulate(int target, const Array& g, bool negate) {
    if (node_scalar(target) && g.size() > 1) {
      grad_buf(target)[0] += negate ? -g.sum() : g.sum();
    } else if (negate) {
      grad_buf(target) -= g;
    } else {
      grad_buf(target) += g;
    }
  }

  std::vector<Node> nodes_;
  std::vector<Array> grads_;
  bool swept_ = false;
  std::size_t backward_calls_ = 0;
};

using Tape = TapeT<double>;

// -- elementwise and reduction ops -------------------------------------------

namespace detail {

template <typename S>
void require_elementwise(const TensorT<S>& a, const TensorT<S>& b,
                         const char* op) {
  if (a.shape() == b.shape()) return;
  if (a.numel() == 1 || b.numel() == 1) return;  // scalar-with-tensor only
  throw DimensionError(std::string(op) + ": shape mismatch " +
                       shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename S>
const Shape& broadcast_shape(const TensorT<S>& a, const TensorT<S>& b) {
  return a.numel() == 1 && b.numel() > 1 ? b.shape() : a.shape();
}

}  // namespace detail

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  detail::require_elementwise(a, b, "add");
  ArrayX<S> out;
  if (a.numel() == 1 && b.numel() > 1)
    out = a.values()[0] + b.values();
  else if (b.numel() == 1 && a.numel() > 1)
    out = a.values() + b.values()[0];
  else
    out = a.values() + b.values();
  auto* tape = TapeT<S>::owner(a, b);
  if (!tape) return TensorT<S>(detail::broadcast_shape(a, b), std::move(out));
  return tape->record2(OpKind::kAdd, a, b, detail::broadcast_shape(a, b),
                       std::move(out));
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  detail::require_elementwise(a, b, "sub");
  ArrayX<S> out;
  if (a.numel() == 1 && b.numel() > 1)
    out = a.values()[0] - b.values();
  else if (b.numel() == 1 && a.numel() > 1)
    out = a.values() - b.values()[0];
  else
    out = a.values() - b.values();
  auto* tape = TapeT<S>::owner(a, b);
  if (!tape) return TensorT<S>(detail::broadcast_shape(a, b), std::move(out));
  return tape->record2(OpKind::kSub, a, b, detail::broadcast_shape(a, b),
                       std::move(out));
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  detail::require_elementwise(a, b, "mul");
  ArrayX<S> out;
  if (a.numel() == 1 && b.numel() > 1)
    out = a.values()[0] * b.values();
  else if (b.numel() == 1 && a.numel() > 1)
    out = a.values() * b.values()[0];
  else
    out = a.values() * b.values();
  auto* tape = TapeT<S>::owner(a, b);
  if (!tape) return TensorT<S>(detail::broadcast_shape(a, b), std::move(out));
  return tape->record2(OpKind::kMul, a, b, detail::broadcast_shape(a, b),
                       std::move(out));
}

template <typename S>
TensorT<S> neg(const TensorT<S>& x) {
  ArrayX<S> out = -x.values();
  auto* tape = TapeT<S>::owner(x);
  if (!tape) return TensorT<S>(x.shape(), std::move(out));
  return tape->record1(OpKind::kNeg, x, x.shape(), std::move(out));
}

template <typename S>
TensorT<S> tanh(const TensorT<S>& x) {
  ArrayX<S> out = x.values().tanh();
  auto* tape = TapeT<S>::owner(x);
  if (!tape) return TensorT<S>(x.shape(), std::move(out));
  return tape->record1(OpKind::kTanh, x, x.shape(), std::move(out));
}

template <typename S>
TensorT<S> sigmoid(const TensorT<S>& x) {
  ArrayX<S> out = S(1) / (S(1) + (-x.values()).exp());
  auto* tape = TapeT<S>::owner(x);
  if (!tape) return TensorT<S>(x.shape(), std::move(out));
  return tape->record1(OpKind::kSigmoid, x, x.shape(), std::move(out));
}

template <typename S>
TensorT<S> log(const TensorT<S>& x) {
  if ((x.values() <= S(0)).any())
    throw NumericError("log: non-positive input");
  ArrayX<S> out = x.values().log();
  auto* tape = TapeT<S>::owner(x);
  if (!tape) return TensorT<S>(x.shape(), std::move(out));
  return tape->record1(OpKind::kLog, x, x.shape(), std::move(out));
}

/// min/max clamp; gradient passes through inside [lo, hi] and is cut outside.
template <typename S>
TensorT<S> clamp(const TensorT<S>& x, S lo, S hi) {
  ArrayX<S> out = x.values().max(lo).min(hi);
  auto* tape = TapeT<S>::owner(x);
  if (!tape) return TensorT<S>(x.shape(), std::move(out));
  return tape->record1(OpKind::kClamp, x, x.shape(), std::move(out), lo, hi);
}

/// Identity forward; multiplies the upstream gradient by `factor` backward.
template <typename S>
TensorT<S> grad_scale(const TensorT<S>& x, S factor) {
  auto* tape = TapeT<S>::owner(x);
  if (!tape) return x;
  ArrayX<S> out = x.values();  // bit-identical copy
  return tape->record1(OpKind::kGradScale, x, x.shape(), std::move(out), factor);
}

template <typename S>
TensorT<S> reduce_mean(const TensorT<S>& x) {
  ArrayX<S> out(1);
  out[0] = x.values().mean();
  auto* tape = TapeT<S>::owner(x);
  if (!tape) return TensorT<S>({1}, std::move(out));
  return tape->record1(OpKind::kReduceMean, x, {1}, std::move(out));
}

template <typename S>
TensorT<S> reduce_sum(const TensorT<S>& x) {
  ArrayX<S> out(1);
  out[0] = x.values().sum();
  auto* tape = TapeT<S>::owner(x);
  if (!tape) return TensorT<S>({1}, std::move(out));
  return tape->record1(OpKind::kReduceSum, x, {1}, std::move(out));
}

template <typename S>
TensorT<S> reshape(const TensorT<S>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) +
                         " as " + shape_str(shape));
  auto* tape = TapeT<S>::owner(x);
  if (!tape) return TensorT<S>(std::move(shape), x.values_ptr(), nullptr, -1);
  ArrayX<S> out = x.values();
  return tape->record1(OpKind::kReshape, x, std::move(shape), std::move(out));
}

// -- matrix products ----------------------------------------------------------

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows())
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  const Index m = a.rows(), k = a.cols(), p = b.cols();
  Eigen::Map<const RowMajorMatrix<S>> A(a.values().data(), m, k);
  Eigen::Map<const RowMajorMatrix<S>> B(b.values().data(), k, p);
  ArrayX<S> out(m * p);
  Eigen::Map<RowMajorMatrix<S>>(out.data(), m, p).noalias() = A * B;
  auto* tape = TapeT<S>::owner(a, b);
  if (!tape) return TensorT<S>({m, p}, std::move(out));
  return tape->record2(OpKind::kMatMul, a, b, {m, p}, std::move(out));
}

/// a * b^T without materializing the transpose.
template <typename S>
TensorT<S> matmul_t(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols())
    throw DimensionError("matmul_t: incompatible shapes " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()) + "^T");
  const Index m = a.rows(), k = a.cols(), p = b.rows();
  Eigen::Map<const RowMajorMatrix<S>> A(a.values().data(), m, k);
  Eigen::Map<const RowMajorMatrix<S>> B(b.values().data(), p, k);
  ArrayX<S> out(m * p);
  Eigen::Map<RowMajorMatrix<S>>(out.data(), m, p).noalias() = A * B.transpose();
  auto* tape = TapeT<S>::owner(a, b);
  if (!tape) return TensorT<S>({m, p}, std::move(out));
  return tape->record2(OpKind::kMatMulT, a, b, {m, p}, std::move(out));
}

/// X [m,n] plus a length-n bias applied to every row (explicit broadcast).
template <typename S>
TensorT<S> add_rowwise(const TensorT<S>& x, const TensorT<S>& b) {
  if (x.ndim() != 2 || b.numel() != x.cols())
    throw DimensionError("add_rowwise: " + shape_str(x.shape()) + " + " +
                         shape_str(b.shape()));
  const Index m = x.rows(), c = x.cols();
  ArrayX<S> out(m * c);
  Eigen::Map<RowMajorMatrix<S>>(out.data(), m, c) =
      Eigen::Map<const RowMajorMatrix<S>>(x.values().data(), m, c).rowwise() +
      b.values().matrix().transpose();
  auto* tape = TapeT<S>::owner(x, b);
  if (!tape) return TensorT<S>({m, c}, std::move(out));
  return tape->record2(OpKind::kAddRowwise, x, b, {m, c}, std::move(out));
}

// -- operator sugar -----------------------------------------------------------

template <typename S>
TensorT<S> operator+(const TensorT<S>& a, const TensorT<S>& b) { return add(a, b); }
template <typename S>
TensorT<S> operator-(const TensorT<S>& a, const TensorT<S>& b) { return sub(a, b); }
template <typename S>
TensorT<S> operator*(const TensorT<S>& a, const TensorT<S>& b) { return mul(a, b); }
template <typename S>
TensorT<S> operator-(const TensorT<S>& a) { return neg(a); }
template <typename S>
TensorT<S> operator*(S s, const TensorT<S>& a) { return mul(TensorT<S>::scalar(s), a); }
template <typename S>
TensorT<S> operator*(const TensorT<S>& a, S s) { return mul(a, TensorT<S>::scalar(s)); }

// -- constant-only views -------------------------------------------------------

/// Timestep slice of a [B,W,F] batch: the [B,F] matrix at time t. Only valid
/// on constants; batches are model inputs and carry no gradient.
template <typename S>
TensorT<S> slice_time(const TensorT<S>& batch, Index t) {
  if (batch.on_tape())
    throw ContractError("slice_time: defined for constant tensors only");
  if (batch.ndim() != 3)
    throw DimensionError("slice_time: need [B,W,F], got " + shape_str(batch.shape()));
  const Index B = batch.dim(0), W = batch.dim(1), F = batch.dim(2);
  if (t < 0 || t >= W) throw ContractError("slice_time: t out of range");
  ArrayX<S> out(B * F);
  for (Index b = 0; b < B; ++b)
    out.segment(b * F, F) = batch.values().segment(b * W * F + t * F, F);
  return TensorT<S>({B, F}, std::move(out));
}

/// One sequence of a [B,W,F] batch as a [W,F] constant.
template <typename S>
TensorT<S> slice_sequence(const TensorT<S>& batch, Index b) {
  if (batch.on_tape())
    throw ContractError("slice_sequence: defined for constant tensors only");
  if (batch.ndim() != 3)
    throw DimensionError("slice_sequence: need [B,W,F], got " + shape_str(batch.shape()));
  const Index B = batch.dim(0), W = batch.dim(1), F = batch.dim(2);
  if (b < 0 || b >= B) throw ContractError("slice_sequence: index out of range");
  ArrayX<S> out = batch.values().segment(b * W * F, W * F);
  return TensorT<S>({W, F}, std::move(out));
}

/// Stack per-window [W,F] matrices into a [B,W,F] constant.
template <typename S>
TensorT<S> stack_sequences(const std::vector<MatrixX<S>>& seqs) {
  if (seqs.empty()) throw ContractError("stack_sequences: empty batch");
  const Index W = seqs.front().rows(), F = seqs.front().cols();
  const Index B = static_cast<Index>(seqs.size());
  ArrayX<S> out(B * W * F);
  for (Index b = 0; b < B; ++b) {
    if (seqs[static_cast<std::size_t>(b)].rows() != W ||
        seqs[static_cast<std::size_t>(b)].cols() != F)
      throw DimensionError("stack_sequences: ragged batch");
    RowMajorMatrix<S> rm = seqs[static_cast<std::size_t>(b)];
    out.segment(b * W * F, W * F) = Eigen::Map<const ArrayX<S>>(rm.data(), W * F);
  }
  return TensorT<S>({B, W, F}, std::move(out));
}

// -- gradient checking ----------------------------------------------------------

/// Max over coordinates of |analytic - numeric| / max(1, |numeric|) where the
/// numeric gradient is the central difference of the scalar function f.
template <typename S, typename F>
S grad_check(F&& f, const TensorT<S>& x, S eps) {
  if (eps <= S(0)) throw ContractError("grad_check: eps must be positive");
  TapeT<S> tape;
  TensorT<S> xv = tape.variable(x);
  TensorT<S> loss = f(tape, xv);
  if (loss.numel() != 1)
    throw ContractError("grad_check: f must be scalar-valued");
  tape.backward(loss);
  ArrayX<S> analytic = tape.grad(xv).values();

  ArrayX<S> base = x.values();
  S max_err = 0;
  for (Index i = 0; i < base.size(); ++i) {
    ArrayX<S> bumped = base;
    bumped[i] = base[i] + eps;
    TapeT<S> tp;
    S fp = f(tp, tp.variable(TensorT<S>(x.shape(), bumped))).value();
    bumped[i] = base[i] - eps;
    TapeT<S> tm;
    S fm = f(tm, tm.variable(TensorT<S>(x.shape(), bumped))).value();
    S numeric = (fp - fm) / (S(2) * eps);
    S err = std::abs(analytic[i] - numeric) / std::max(S(1), std::abs(numeric));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace dannte
