#pragma once

#include <memory>

#include "protoprobe/heads.hpp"

namespace protoprobe::detail {

template <typename Scalar>
std::unique_ptr<Head<Scalar>> make_dense_head(HeadKind kind, const HeadDims& dims, const HeadHyper& hyper);
template <typename Scalar>
std::unique_ptr<Head<Scalar>> make_attentive_head(HeadKind kind, const HeadDims& dims, const HeadHyper& hyper);
template <typename Scalar>
std::unique_ptr<Head<Scalar>> make_prototype_head(HeadKind kind, const HeadDims& dims, const HeadHyper& hyper);

/// Numerically stable softmax of each row.
template <typename Scalar>
void softmax_rows(Matrix<Scalar>& m) {
  for (Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
}

/// Backward of a row softmax: given weights a and upstream da, returns d(scores).
template <typename Scalar>
Matrix<Scalar> softmax_rows_backward(const Matrix<Scalar>& a, const Matrix<Scalar>& da) {
  Matrix<Scalar> ds = a.cwiseProduct(da);
  const Vector<Scalar> inner = ds.rowwise().sum();
  ds -= (a.array().colwise() * inner.array()).matrix();
  return ds;
}

}  // namespace protoprobe::detail
