#ifndef TWINS_TENSOR_HPP
#define TWINS_TENSOR_HPP

#include <Eigen/Core>

#include <cstring>
#include <initializer_list>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "twins/error.hpp"

namespace twins {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using Labels = std::vector<int>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

/// Dense row-major array. Rank-0 tensors (empty shape) hold one value.
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<Matrix>;
  using ConstMatrixMap = Eigen::Map<const Matrix>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(Vector::Zero(numel(shape_))) {
    for (Index extent : shape_) {
      if (extent <= 0) throw InvalidArgument("tensor extents must be positive, got " + to_string(shape_));
    }
  }

  Tensor(Shape shape, Vector data) : Tensor(std::move(shape)) {
    if (data.size() != data_.size()) {
      throw InvalidArgument("tensor of shape " + to_string(shape_) + " cannot hold " +
                            std::to_string(data.size()) + " values");
    }
    data_ = std::move(data);
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape), Eigen::Map<const Vector>(values.begin(), static_cast<Index>(values.size()))) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor constant(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  static Tensor scalar(Scalar value) { return constant({}, value); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Vector& data() { return data_; }
  const Vector& data() const { return data_; }
  Scalar* raw() { return data_.data(); }
  const Scalar* raw() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar item() const {
    if (size() != 1) throw InvalidArgument("item() on tensor of shape " + to_string(shape_));
    return data_[0];
  }

  // Row-major 2-D view: leading axis is rows, the rest are flattened into columns.
  MatrixMap matrix() { return MatrixMap(raw(), rows(), size() / rows()); }
  ConstMatrixMap matrix() const { return ConstMatrixMap(raw(), rows(), size() / rows()); }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  template <typename Other>
  Tensor<Other> cast() const {
    if (empty()) return {};
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

 private:
  Index rows() const { return shape_.empty() ? 1 : shape_.front(); }

  Shape shape_;
  Vector data_;
};

template <typename Scalar>
bool bitwise_equal(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.raw(), b.raw(), sizeof(Scalar) * static_cast<std::size_t>(a.size())) == 0;
}

/// Rows [begin, end) along the leading axis.
template <typename Scalar>
Tensor<Scalar> slice_rows(const Tensor<Scalar>& t, Index begin, Index end) {
  if (t.rank() == 0 || begin < 0 || end > t.dim(0) || begin >= end) {
    throw InvalidArgument("slice_rows: invalid range [" + std::to_string(begin) + "," + std::to_string(end) +
                          ") for shape " + to_string(t.shape()));
  }
  Shape shape = t.shape();
  const Index stride = t.size() / shape[0];
  shape[0] = end - begin;
  return Tensor<Scalar>(shape, t.data().segment(begin * stride, (end - begin) * stride));
}

/// Gathers rows by index along the leading axis.
template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& t, const std::vector<Index>& rows) {
  Shape shape = t.shape();
  const Index stride = t.size() / shape[0];
  shape[0] = static_cast<Index>(rows.size());
  Tensor<Scalar> out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.data().segment(static_cast<Index>(i) * stride, stride) = t.data().segment(rows[i] * stride, stride);
  }
  return out;
}

// Ordered maps so that every iteration (serialization, norms, updates) is deterministic.
template <typename Scalar>
using ParamStore = std::map<std::string, Tensor<Scalar>>;

template <typename Scalar>
using GradientSet = std::map<std::string, Tensor<Scalar>>;

template <typename To, typename From>
ParamStore<To> cast_params(const ParamStore<From>& params) {
  ParamStore<To> out;
  for (const auto& [name, t] : params) out.emplace(name, t.template cast<To>());
  return out;
}

}  // namespace twins

#endif  // TWINS_TENSOR_HPP
