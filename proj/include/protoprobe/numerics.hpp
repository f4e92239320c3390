#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

#include "protoprobe/errors.hpp"

namespace protoprobe {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Row-major so that a (D, N) token map matches the on-disk (D, S_t, S_f) order.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using MatrixMap = Eigen::Map<Matrix<Scalar>>;
template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const Matrix<Scalar>>;
template <typename Scalar>
using VectorMap = Eigen::Map<Vector<Scalar>>;
template <typename Scalar>
using ConstVectorMap = Eigen::Map<const Vector<Scalar>>;

std::string shape_string(const Shape& shape);

/// Dense row-major tensor of arbitrary rank. Rank-1 and rank-2 tensors expose
/// Eigen views; higher ranks are viewed as (shape[0], product of the rest).
template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::initializer_list<Scalar> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor identity(Index n);
  static Tensor from_vector(const Vector<Scalar>& v);

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return data_.size(); }
  Index dim(Index i) const { return shape_.at(static_cast<std::size_t>(i)); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  VectorMap<Scalar> flat() { return VectorMap<Scalar>(data_.data(), data_.size()); }
  ConstVectorMap<Scalar> flat() const { return ConstVectorMap<Scalar>(data_.data(), data_.size()); }

  MatrixMap<Scalar> matrix();
  ConstMatrixMap<Scalar> matrix() const;

  void set_zero() { data_.setZero(); }
  bool all_finite() const { return data_.allFinite(); }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_);
    out.flat() = data_.template cast<Other>();
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  Vector<Scalar> data_;
};

/// Throws NumericError naming `what` if any element is NaN or infinite.
template <typename Derived>
void require_finite(const Eigen::DenseBase<Derived>& values, const std::string& what) {
  if (!values.allFinite()) throw NumericError("non-finite value in " + what);
}

template <typename Scalar>
Tensor<Scalar> matvec(const Tensor<Scalar>& m, const Tensor<Scalar>& v);

/// Cosine similarity with 64-bit accumulation, clamped to [-1, 1].
/// Throws DegenerateError when either input has zero norm.
template <typename Scalar>
double cosine(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename DerivedA, typename DerivedB>
double cosine(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  if (a.size() != b.size()) {
    throw DimensionError("cosine: length " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  }
  require_finite(a, "cosine lhs");
  require_finite(b, "cosine rhs");
  double dot = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (Index k = 0; k < a.size(); ++k) {
    const double x = static_cast<double>(a(k));
    const double y = static_cast<double>(b(k));
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na == 0.0 || nb == 0.0) throw DegenerateError("cosine: zero-norm input");
  const double c = dot / (std::sqrt(na) * std::sqrt(nb));
  return c > 1.0 ? 1.0 : (c < -1.0 ? -1.0 : c);
}

/// Central-difference gradient check. Returns
/// max_k |fd_k - analytic_k| / max(1, |analytic_k|).
template <typename Scalar>
double grad_check(const std::function<double(const Tensor<Scalar>&)>& f,
                  const Tensor<Scalar>& theta, const Tensor<Scalar>& analytic, double eps);

}  // namespace protoprobe
