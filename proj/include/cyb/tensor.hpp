#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cyb {

using Index = std::int64_t;
using Shape = std::vector<Index>;

/// Raised when operand shapes do not fit an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  if (shape.size() == 1) os << ',';
  os << ')';
  return os.str();
}

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

/// Dense row-major array of `Scalar` with an arbitrary number of axes.
///
/// Storage is a contiguous Eigen column vector; `matrix()` reinterprets it as
/// a row-major (numel / last_dim) x last_dim matrix so linear-algebra kernels
/// can run on it without copies.
template <typename Scalar>
class BasicTensor {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  BasicTensor() : shape_{0}, data_() {}

  explicit BasicTensor(Shape shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_ = Vector::Zero(shape_numel(shape_));
  }

  BasicTensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (shape_numel(shape_) != data_.size()) {
      throw DimensionError("tensor shape " + shape_str(shape_) + " holds " +
                           std::to_string(shape_numel(shape_)) + " values, got " +
                           std::to_string(data_.size()));
    }
  }

  BasicTensor(Shape shape, std::initializer_list<Scalar> values)
      : BasicTensor(std::move(shape), Vector(Eigen::Map<const Vector>(
                                          values.begin(), static_cast<Index>(values.size())))) {}

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }

  /// Storage left unset; for outputs that are overwritten in full.
  static BasicTensor uninitialized(Shape shape) {
    check_shape(shape);
    const Index n = shape_numel(shape);
    return BasicTensor(std::move(shape), Vector(n));
  }

  static BasicTensor constant(Shape shape, Scalar value) {
    BasicTensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  static BasicTensor scalar(Scalar value) { return constant({1}, value); }

  static BasicTensor from_matrix(const RowMatrix& m) {
    BasicTensor t({m.rows(), m.cols()});
    t.matrix() = m;
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index ndim() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const {
    if (axis < 0) axis += ndim();
    return shape_.at(static_cast<std::size_t>(axis));
  }
  Index numel() const { return data_.size(); }
  Index last_dim() const { return shape_.back(); }

  Vector& data() { return data_; }
  const Vector& data() const { return data_; }
  Scalar* raw() { return data_.data(); }
  const Scalar* raw() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  /// Flat offset of a multi-index; bounds are not checked.
  Index offset(std::initializer_list<Index> idx) const {
    Index off = 0;
    std::size_t a = 0;
    for (Index i : idx) off = off * shape_[a++] + i;
    return off;
  }
  Scalar& at(std::initializer_list<Index> idx) { return data_[offset(idx)]; }
  Scalar at(std::initializer_list<Index> idx) const { return data_[offset(idx)]; }

  MatrixMap matrix() { return MatrixMap(data_.data(), numel() / last_dim(), last_dim()); }
  ConstMatrixMap matrix() const {
    return ConstMatrixMap(data_.data(), numel() / last_dim(), last_dim());
  }

  /// Same data, new shape; element count must be preserved.
  BasicTensor reshaped(Shape shape) const { return BasicTensor(std::move(shape), data_); }

  bool all_finite() const { return data_.allFinite(); }

  bool operator==(const BasicTensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
    for (Index d : shape) {
      if (d < 0) throw DimensionError("negative dimension in shape " + shape_str(shape));
    }
  }

  Shape shape_;
  Vector data_;
};

using Tensor = BasicTensor<double>;

}  // namespace cyb
