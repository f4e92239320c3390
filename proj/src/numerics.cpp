#include "protoprobe/numerics.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace protoprobe {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace {

Index element_count(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d <= 0) throw DimensionError("tensor shape " + shape_string(shape) + " has a non-positive dimension");
    n *= d;
  }
  return n;
}

}  // namespace

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape) : shape_(std::move(shape)), data_(Vector<Scalar>::Zero(element_count(shape_))) {}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, std::initializer_list<Scalar> values) : Tensor(std::move(shape)) {
  if (static_cast<Index>(values.size()) != data_.size()) {
    throw DimensionError("tensor " + shape_string(shape_) + " given " + std::to_string(values.size()) + " values");
  }
  Index i = 0;
  for (Scalar v : values) data_[i++] = v;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::identity(Index n) {
  Tensor out({n, n});
  out.matrix().setIdentity();
  return out;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from_vector(const Vector<Scalar>& v) {
  Tensor out({v.size()});
  out.flat() = v;
  return out;
}

template <typename Scalar>
MatrixMap<Scalar> Tensor<Scalar>::matrix() {
  if (shape_.empty()) throw DimensionError("matrix view of an empty tensor");
  const Index rows = shape_[0];
  return MatrixMap<Scalar>(data_.data(), rows, data_.size() / rows);
}

template <typename Scalar>
ConstMatrixMap<Scalar> Tensor<Scalar>::matrix() const {
  if (shape_.empty()) throw DimensionError("matrix view of an empty tensor");
  const Index rows = shape_[0];
  return ConstMatrixMap<Scalar>(data_.data(), rows, data_.size() / rows);
}

template <typename Scalar>
Tensor<Scalar> matvec(const Tensor<Scalar>& m, const Tensor<Scalar>& v) {
  if (m.rank() != 2 || v.rank() != 1 || m.dim(1) != v.dim(0)) {
    throw DimensionError("matvec: matrix " + shape_string(m.shape()) + " vs vector " + shape_string(v.shape()));
  }
  require_finite(m.flat(), "matvec matrix");
  require_finite(v.flat(), "matvec vector");
  Tensor<Scalar> out({m.dim(0)});
  const auto a = m.matrix();
  for (Index r = 0; r < a.rows(); ++r) {
    double acc = 0.0;
    for (Index c = 0; c < a.cols(); ++c) acc += static_cast<double>(a(r, c)) * static_cast<double>(v[c]);
    out[r] = static_cast<Scalar>(acc);
  }
  return out;
}

template <typename Scalar>
double cosine(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 1 || b.rank() != 1) {
    throw DimensionError("cosine: expected vectors, got " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  return cosine(a.flat(), b.flat());
}

template <typename Scalar>
double grad_check(const std::function<double(const Tensor<Scalar>&)>& f, const Tensor<Scalar>& theta,
                  const Tensor<Scalar>& analytic, double eps) {
  if (!(eps > 0.0 && eps <= 1e-2)) throw ConfigError("grad_check: eps must lie in (0, 1e-2]");
  if (theta.shape() != analytic.shape()) {
    throw DimensionError("grad_check: theta " + shape_string(theta.shape()) + " vs gradient " +
                         shape_string(analytic.shape()));
  }
  Tensor<Scalar> probe = theta;
  double worst = 0.0;
  for (Index k = 0; k < theta.size(); ++k) {
    const Scalar base = theta[k];
    probe[k] = static_cast<Scalar>(base + eps);
    const double up = f(probe);
    probe[k] = static_cast<Scalar>(base - eps);
    const double down = f(probe);
    probe[k] = base;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("grad_check: non-finite objective at coordinate " + std::to_string(k));
    }
    // Use the step actually representable in Scalar.
    const double step = static_cast<double>(static_cast<Scalar>(base + eps)) -
                        static_cast<double>(static_cast<Scalar>(base - eps));
    const double fd = (up - down) / step;
    const double g = static_cast<double>(analytic[k]);
    worst = std::max(worst, std::abs(fd - g) / std::max(1.0, std::abs(g)));
  }
  return worst;
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> matvec(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> matvec(const Tensor<double>&, const Tensor<double>&);
template double cosine(const Tensor<float>&, const Tensor<float>&);
template double cosine(const Tensor<double>&, const Tensor<double>&);
template double grad_check(const std::function<double(const Tensor<float>&)>&, const Tensor<float>&,
                           const Tensor<float>&, double);
template double grad_check(const std::function<double(const Tensor<double>&)>&, const Tensor<double>&,
                           const Tensor<double>&, double);

}  // namespace protoprobe
