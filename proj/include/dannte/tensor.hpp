#pragma once

#include <Eigen/Dense>

#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dannte/errors.hpp"

namespace dannte {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using RowMajorMatrix =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

template <typename Scalar>
class TapeT;

/// Dense n-d value, flat row-major storage. A tensor is either a free
/// constant or a handle onto a node of the tape that produced it.
template <typename Scalar>
class TensorT {
 public:
  using Array = ArrayX<Scalar>;

  TensorT() : TensorT(Scalar(0)) {}

  explicit TensorT(Scalar v)
      : shape_{1}, values_(std::make_shared<Array>(Array::Constant(1, v))) {}

  TensorT(Shape shape, Array values)
      : shape_(std::move(shape)),
        values_(std::make_shared<Array>(std::move(values))) {
    validate();
  }

  TensorT(Shape shape, std::shared_ptr<const Array> values, TapeT<Scalar>* tape,
          int node)
      : shape_(std::move(shape)), values_(std::move(values)), tape_(tape), node_(node) {
    validate();
  }

  static TensorT scalar(Scalar v) { return TensorT(v); }

  static TensorT zeros(Shape shape) {
    Index n = shape_numel(shape);
    return TensorT(std::move(shape), Array::Zero(n));
  }

  static TensorT full(Shape shape, Scalar v) {
    Index n = shape_numel(shape);
    return TensorT(std::move(shape), Array::Constant(n, v));
  }

  static TensorT from_vector(const VectorX<Scalar>& v) {
    return TensorT({v.size()}, v.array());
  }

  static TensorT from_vector(std::initializer_list<Scalar> v) {
    Array a(static_cast<Index>(v.size()));
    Index i = 0;
    for (Scalar x : v) a[i++] = x;
    return TensorT({static_cast<Index>(v.size())}, std::move(a));
  }

  /// Row-major flattening of a (column-major) Eigen matrix.
  static TensorT from_matrix(const MatrixX<Scalar>& m) {
    RowMajorMatrix<Scalar> rm = m;
    return TensorT({m.rows(), m.cols()},
                   Eigen::Map<const Array>(rm.data(), rm.size()));
  }

  const Shape& shape() const { return shape_; }
  Index ndim() const { return static_cast<Index>(shape_.size()); }
  Index numel() const { return values_->size(); }
  Index dim(std::size_t i) const { return shape_[i]; }

  Index rows() const {
    require_2d("rows()");
    return shape_[0];
  }
  Index cols() const {
    require_2d("cols()");
    return shape_[1];
  }

  const Array& values() const { return *values_; }
  const std::shared_ptr<const Array>& values_ptr() const { return values_; }

  Scalar operator[](Index i) const { return (*values_)[i]; }

  /// Value of a one-element tensor.
  Scalar value() const {
    if (numel() != 1)
      throw ContractError("value() requires a scalar tensor, got shape " +
                          shape_str(shape_));
    return (*values_)[0];
  }

  Scalar at(Index r, Index c) const {
    require_2d("at()");
    return (*values_)[r * shape_[1] + c];
  }

  /// Export as a (row-major interpreted) Eigen matrix; 1-d tensors become rows.
  MatrixX<Scalar> matrix() const {
    Index r = ndim() == 1 ? 1 : shape_[0];
    Index c = ndim() == 1 ? shape_[0] : shape_[1];
    if (ndim() > 2)
      throw ContractError("matrix() requires ndim <= 2, got " + shape_str(shape_));
    return Eigen::Map<const RowMajorMatrix<Scalar>>(values_->data(), r, c);
  }

  VectorX<Scalar> vector() const { return values_->matrix(); }

  bool on_tape() const { return tape_ != nullptr; }
  TapeT<Scalar>* tape() const { return tape_; }
  int node() const { return node_; }

  /// The same values as a free constant (drops the tape handle).
  TensorT detached() const { return TensorT(shape_, values_, nullptr, -1); }

 private:
  void validate() const {
    if (!values_) throw ContractError("tensor without storage");
    if (shape_.empty()) throw DimensionError("tensor shape must not be empty");
    for (Index d : shape_)
      if (d < 1)
        throw DimensionError("tensor dimensions must be >= 1, got " +
                             shape_str(shape_));
    if (shape_numel(shape_) != values_->size())
      throw DimensionError("shape " + shape_str(shape_) + " does not match " +
                           std::to_string(values_->size()) + " values");
  }

  void require_2d(const char* what) const {
    if (ndim() != 2)
      throw ContractError(std::string(what) + " requires a 2-d tensor, got " +
                          shape_str(shape_));
  }

  Shape shape_;
  std::shared_ptr<const Array> values_;
  TapeT<Scalar>* tape_ = nullptr;
  int node_ = -1;
};

using Tensor = TensorT<double>;

}  // namespace dannte
