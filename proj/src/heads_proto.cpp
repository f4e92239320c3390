// Prototypical probes: J prototypes scored against every token by cosine similarity,
// max-pooled over the grid, then mapped to logits by a bias-free linear layer.
// protobin scores with sign(P~) and passes gradients straight through the sign.

#include <cmath>
#include <algorithm>
#include <limits>

#include "heads_impl.hpp"

namespace protoprobe::detail {
namespace {

template <typename Scalar, bool Binary>
class PrototypeHead final : public Head<Scalar> {
 public:
  PrototypeHead(const HeadDims& d, const HeadHyper& h)
      : Head<Scalar>(Binary ? HeadKind::protobin : HeadKind::proto, d, h) {
    if (h.prototypes_per_class <= 0) throw ConfigError("prototypes per class must be positive");
    const Index count = h.prototypes_per_class * d.classes;
    p_ = this->add_param("P", {count, d.dim}, d.dim, InitRule::unit_rows);
    w_ = this->add_param("W", {d.classes, count}, count);
  }

  ProbeOutput<Scalar> forward(const Clip<Scalar>& clip) const override {
    this->check_clip(clip);
    const auto& z = clip.tokens;
    const Index n_tokens = z.cols();

    Vector<Scalar> token_norm(n_tokens);
    bool any_token = false;
    for (Index n = 0; n < n_tokens; ++n) {
      token_norm(n) = static_cast<Scalar>(std::sqrt(z.col(n).template cast<double>().squaredNorm()));
      any_token = any_token || token_norm(n) > Scalar(0);
    }
    if (!any_token) throw DegenerateError(std::string(head_name(this->kind())) + ": every token has zero norm");

    const Matrix<Scalar> protos = effective_prototypes();
    Vector<Scalar> proto_norm(protos.rows());
    for (Index j = 0; j < protos.rows(); ++j) {
      proto_norm(j) = static_cast<Scalar>(std::sqrt(protos.row(j).template cast<double>().squaredNorm()));
      if (!(proto_norm(j) > Scalar(0))) {
        throw DegenerateError(std::string(head_name(this->kind())) + ": prototype " + std::to_string(j) +
                              " has zero norm");
      }
    }

    const Matrix<Scalar> dots = protos * z;
    ProbeOutput<Scalar> out;
    out.pooled.resize(protos.rows());
    out.argmax.assign(static_cast<std::size_t>(protos.rows()), -1);
    for (Index j = 0; j < protos.rows(); ++j) {
      Scalar best = -std::numeric_limits<Scalar>::infinity();
      Index where = -1;
      for (Index n = 0; n < n_tokens; ++n) {
        if (token_norm(n) == Scalar(0)) continue;
        Scalar s = dots(j, n) / (proto_norm(j) * token_norm(n));
        s = std::clamp(s, Scalar(-1), Scalar(1));
        if (s > best) {  // strict: first (t, f) in row-major order wins ties
          best = s;
          where = n;
        }
      }
      out.pooled(j) = best;
      out.argmax[static_cast<std::size_t>(j)] = where;
    }
    out.logits = this->pmat(w_) * out.pooled;
    out.vecs = {std::move(token_norm), std::move(proto_norm)};
    out.ready = true;
    return out;
  }

  // For protobin d(sign)/dx is taken as 1, so the prototype gradient is the cosine
  // gradient with respect to p evaluated at p = sign(p~).
  void backward(const Clip<Scalar>& clip, const ProbeOutput<Scalar>& out, const Vector<Scalar>& dy) override {
    this->check_backward(out, dy);
    if (static_cast<Index>(out.argmax.size()) != this->pmat(p_).rows()) {
      throw StateError("prototype backward: forward output does not match this head");
    }
    const auto& z = clip.tokens;
    const Vector<Scalar>& token_norm = out.vecs[0];
    const Vector<Scalar>& proto_norm = out.vecs[1];
    this->gmat(w_).noalias() += dy * out.pooled.transpose();
    const Vector<Scalar> dpooled = this->pmat(w_).transpose() * dy;
    const auto p_tilde = this->pmat(p_);
    auto gp = this->gmat(p_);
    for (Index j = 0; j < p_tilde.rows(); ++j) {
      if (dpooled(j) == Scalar(0)) continue;
      const Index n = out.argmax[static_cast<std::size_t>(j)];
      const Scalar pn = proto_norm(j);
      const Scalar zn = token_norm(n);
      const Scalar s = out.pooled(j);
      if constexpr (Binary) {
        gp.row(j) += dpooled(j) * (z.col(n).transpose() / (pn * zn) - s * binarize(p_tilde.row(j)) / (pn * pn));
      } else {
        gp.row(j) += dpooled(j) * (z.col(n).transpose() / (pn * zn) - s * p_tilde.row(j) / (pn * pn));
      }
    }
  }

 private:
  Matrix<Scalar> effective_prototypes() const {
    if constexpr (Binary) {
      return binarize(this->pmat(p_));
    } else {
      return this->pmat(p_);
    }
  }

  std::size_t p_, w_;
};

}  // namespace

template <typename Scalar>
std::unique_ptr<Head<Scalar>> make_prototype_head(HeadKind kind, const HeadDims& dims, const HeadHyper& hyper) {
  switch (kind) {
    case HeadKind::proto: return std::make_unique<PrototypeHead<Scalar, false>>(dims, hyper);
    case HeadKind::protobin: return std::make_unique<PrototypeHead<Scalar, true>>(dims, hyper);
    default: throw ConfigError("not a prototype head");
  }
}

template std::unique_ptr<Head<float>> make_prototype_head(HeadKind, const HeadDims&, const HeadHyper&);
template std::unique_ptr<Head<double>> make_prototype_head(HeadKind, const HeadDims&, const HeadHyper&);

}  // namespace protoprobe::detail
