// Attentive pooling probes. Each collapses the token map into one descriptor with
// softmax token weights; they differ in how the weights are scored:
//   mhca     one learned query, multi-head, key projection, output projection
//   ep       a few learned queries scored directly against raw tokens, no projections
//   simpool  the token mean as query, one shared key projection
//   abmilp   gated attention w^T (tanh(V z) * sigmoid(U z))

#include <cmath>

#include "heads_impl.hpp"

namespace protoprobe::detail {
namespace {

template <typename Scalar>
class MultiHeadCrossAttentionHead final : public Head<Scalar> {
 public:
  MultiHeadCrossAttentionHead(const HeadDims& d, const HeadHyper& h) : Head<Scalar>(HeadKind::mhca, d, h) {
    if (h.mhca_heads <= 0 || d.dim % h.mhca_heads != 0) {
      throw ConfigError("mhca: D=" + std::to_string(d.dim) + " is not divisible by " + std::to_string(h.mhca_heads) +
                        " heads");
    }
    q_ = this->add_param("q", {d.dim}, d.dim);
    wk_ = this->add_param("Wk", {d.dim, d.dim}, d.dim);
    wo_ = this->add_param("Wo", {d.dim, d.dim}, d.dim);
    w_ = this->add_param("W", {d.classes, d.dim}, d.dim);
    b_ = this->add_param("b", {d.classes}, d.dim);
  }

  ProbeOutput<Scalar> forward(const Clip<Scalar>& clip) const override {
    this->check_clip(clip);
    const auto& z = clip.tokens;
    const Index heads = this->hyper().mhca_heads;
    const Index dh = this->dims().dim / heads;
    const Scalar inv_scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
    const auto q = this->pvec(q_);

    Matrix<Scalar> keys = this->pmat(wk_) * z;
    Matrix<Scalar> attn(heads, z.cols());
    for (Index h = 0; h < heads; ++h) {
      attn.row(h) = q.segment(h * dh, dh).transpose() * keys.middleRows(h * dh, dh) * inv_scale;
    }
    softmax_rows(attn);

    ProbeOutput<Scalar> out;
    out.pooled.resize(this->dims().dim);
    for (Index h = 0; h < heads; ++h) {
      out.pooled.segment(h * dh, dh).noalias() = z.middleRows(h * dh, dh) * attn.row(h).transpose();
    }
    Vector<Scalar> projected = this->pmat(wo_) * out.pooled;
    out.logits = this->pmat(w_) * projected + this->pvec(b_);
    out.mats = {std::move(keys), std::move(attn)};
    out.vecs = {std::move(projected)};
    out.ready = true;
    return out;
  }

  void backward(const Clip<Scalar>& clip, const ProbeOutput<Scalar>& out, const Vector<Scalar>& dy) override {
    this->check_backward(out, dy);
    const auto& z = clip.tokens;
    const Matrix<Scalar>& keys = out.mats[0];
    const Matrix<Scalar>& attn = out.mats[1];
    const Vector<Scalar>& projected = out.vecs[0];
    const Index heads = this->hyper().mhca_heads;
    const Index dh = this->dims().dim / heads;
    const Scalar inv_scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
    const auto q = this->pvec(q_);

    this->gmat(w_).noalias() += dy * projected.transpose();
    this->gvec(b_) += dy;
    const Vector<Scalar> dprojected = this->pmat(w_).transpose() * dy;
    this->gmat(wo_).noalias() += dprojected * out.pooled.transpose();
    const Vector<Scalar> dpooled = this->pmat(wo_).transpose() * dprojected;

    Matrix<Scalar> dattn(heads, z.cols());
    for (Index h = 0; h < heads; ++h) {
      dattn.row(h) = dpooled.segment(h * dh, dh).transpose() * z.middleRows(h * dh, dh);
    }
    const Matrix<Scalar> dscores = softmax_rows_backward(attn, dattn);

    Matrix<Scalar> dkeys(this->dims().dim, z.cols());
    auto gq = this->gvec(q_);
    for (Index h = 0; h < heads; ++h) {
      gq.segment(h * dh, dh).noalias() += keys.middleRows(h * dh, dh) * dscores.row(h).transpose() * inv_scale;
      dkeys.middleRows(h * dh, dh).noalias() = q.segment(h * dh, dh) * dscores.row(h) * inv_scale;
    }
    this->gmat(wk_).noalias() += dkeys * z.transpose();
  }

 private:
  std::size_t q_, wk_, wo_, w_, b_;
};

template <typename Scalar>
class EfficientProbeHead final : public Head<Scalar> {
 public:
  EfficientProbeHead(const HeadDims& d, const HeadHyper& h) : Head<Scalar>(HeadKind::ep, d, h) {
    if (h.ep_queries <= 0) throw ConfigError("ep: query count must be positive");
    queries_ = this->add_param("Q", {h.ep_queries, d.dim}, d.dim);
    w_ = this->add_param("W", {d.classes, d.dim}, d.dim);
  }

  ProbeOutput<Scalar> forward(const Clip<Scalar>& clip) const override {
    this->check_clip(clip);
    const auto& z = clip.tokens;
    Matrix<Scalar> attn = this->pmat(queries_) * z * inv_scale();
    softmax_rows(attn);
    ProbeOutput<Scalar> out;
    out.pooled = (z * attn.transpose()).rowwise().mean();
    out.logits = this->pmat(w_) * out.pooled;
    out.mats = {std::move(attn)};
    out.ready = true;
    return out;
  }

  void backward(const Clip<Scalar>& clip, const ProbeOutput<Scalar>& out, const Vector<Scalar>& dy) override {
    this->check_backward(out, dy);
    const auto& z = clip.tokens;
    const Matrix<Scalar>& attn = out.mats[0];
    this->gmat(w_).noalias() += dy * out.pooled.transpose();
    const Vector<Scalar> dquery_out = this->pmat(w_).transpose() * dy / static_cast<Scalar>(attn.rows());
    Matrix<Scalar> dattn = (z.transpose() * dquery_out).transpose().replicate(attn.rows(), 1);
    const Matrix<Scalar> dscores = softmax_rows_backward(attn, dattn);
    this->gmat(queries_).noalias() += dscores * z.transpose() * inv_scale();
  }

 private:
  Scalar inv_scale() const { return Scalar(1) / std::sqrt(static_cast<Scalar>(this->dims().dim)); }

  std::size_t queries_, w_;
};

template <typename Scalar>
class SimPoolHead final : public Head<Scalar> {
 public:
  SimPoolHead(const HeadDims& d, const HeadHyper& h) : Head<Scalar>(HeadKind::simpool, d, h) {
    wk_ = this->add_param("Wk", {d.dim, d.dim}, d.dim);
    w_ = this->add_param("W", {d.classes, d.dim}, d.dim);
    b_ = this->add_param("b", {d.classes}, d.dim);
  }

  ProbeOutput<Scalar> forward(const Clip<Scalar>& clip) const override {
    this->check_clip(clip);
    const auto& z = clip.tokens;
    Vector<Scalar> mean = z.rowwise().mean();
    Vector<Scalar> query = this->pmat(wk_) * mean;
    Matrix<Scalar> keys = this->pmat(wk_) * z;
    Matrix<Scalar> attn = query.transpose() * keys * inv_scale();
    softmax_rows(attn);
    ProbeOutput<Scalar> out;
    out.pooled = z * attn.transpose();
    out.logits = this->pmat(w_) * out.pooled + this->pvec(b_);
    out.mats = {std::move(keys), std::move(attn)};
    out.vecs = {std::move(mean), std::move(query)};
    out.ready = true;
    return out;
  }

  void backward(const Clip<Scalar>& clip, const ProbeOutput<Scalar>& out, const Vector<Scalar>& dy) override {
    this->check_backward(out, dy);
    const auto& z = clip.tokens;
    const Matrix<Scalar>& keys = out.mats[0];
    const Matrix<Scalar>& attn = out.mats[1];
    const Vector<Scalar>& mean = out.vecs[0];
    const Vector<Scalar>& query = out.vecs[1];
    this->gmat(w_).noalias() += dy * out.pooled.transpose();
    this->gvec(b_) += dy;
    const Vector<Scalar> dpooled = this->pmat(w_).transpose() * dy;
    const Matrix<Scalar> dattn = (z.transpose() * dpooled).transpose();
    const Matrix<Scalar> dscores = softmax_rows_backward(attn, dattn);
    const Vector<Scalar> dquery = keys * dscores.transpose() * inv_scale();
    const Matrix<Scalar> dkeys = query * dscores * inv_scale();
    auto gwk = this->gmat(wk_);
    gwk.noalias() += dquery * mean.transpose();
    gwk.noalias() += dkeys * z.transpose();
  }

 private:
  Scalar inv_scale() const { return Scalar(1) / std::sqrt(static_cast<Scalar>(this->dims().dim)); }

  std::size_t wk_, w_, b_;
};

template <typename Scalar>
class GatedAttentionMilHead final : public Head<Scalar> {
 public:
  GatedAttentionMilHead(const HeadDims& d, const HeadHyper& h) : Head<Scalar>(HeadKind::abmilp, d, h) {
    if (h.abmilp_queries <= 0) throw ConfigError("abmilp: query count must be positive");
    v_ = this->add_param("V", {d.dim, d.dim}, d.dim);
    u_ = this->add_param("U", {d.dim, d.dim}, d.dim);
    a_ = this->add_param("w", {h.abmilp_queries, d.dim}, d.dim);
    w_ = this->add_param("W", {d.classes, d.dim}, d.dim);
    b_ = this->add_param("b", {d.classes}, d.dim);
  }

  ProbeOutput<Scalar> forward(const Clip<Scalar>& clip) const override {
    this->check_clip(clip);
    const auto& z = clip.tokens;
    Matrix<Scalar> tanh_v = (this->pmat(v_) * z).array().tanh().matrix();
    Matrix<Scalar> gate = (this->pmat(u_) * z).unaryExpr([](Scalar x) { return Scalar(1) / (Scalar(1) + std::exp(-x)); });
    Matrix<Scalar> gated = tanh_v.cwiseProduct(gate);
    Matrix<Scalar> attn = this->pmat(a_) * gated;
    softmax_rows(attn);
    ProbeOutput<Scalar> out;
    out.pooled = (z * attn.transpose()).rowwise().mean();
    out.logits = this->pmat(w_) * out.pooled + this->pvec(b_);
    out.mats = {std::move(tanh_v), std::move(gate), std::move(gated), std::move(attn)};
    out.ready = true;
    return out;
  }

  void backward(const Clip<Scalar>& clip, const ProbeOutput<Scalar>& out, const Vector<Scalar>& dy) override {
    this->check_backward(out, dy);
    const auto& z = clip.tokens;
    const Matrix<Scalar>& tanh_v = out.mats[0];
    const Matrix<Scalar>& gate = out.mats[1];
    const Matrix<Scalar>& gated = out.mats[2];
    const Matrix<Scalar>& attn = out.mats[3];
    this->gmat(w_).noalias() += dy * out.pooled.transpose();
    this->gvec(b_) += dy;
    const Vector<Scalar> dbranch = this->pmat(w_).transpose() * dy / static_cast<Scalar>(attn.rows());
    const Matrix<Scalar> dattn = (z.transpose() * dbranch).transpose().replicate(attn.rows(), 1);
    const Matrix<Scalar> dscores = softmax_rows_backward(attn, dattn);
    this->gmat(a_).noalias() += dscores * gated.transpose();
    const Matrix<Scalar> dgated = this->pmat(a_).transpose() * dscores;
    const Matrix<Scalar> dv = dgated.cwiseProduct(gate).cwiseProduct(
        (Scalar(1) - tanh_v.array().square()).matrix());
    const Matrix<Scalar> du = dgated.cwiseProduct(tanh_v).cwiseProduct(
        (gate.array() * (Scalar(1) - gate.array())).matrix());
    this->gmat(v_).noalias() += dv * z.transpose();
    this->gmat(u_).noalias() += du * z.transpose();
  }

 private:
  std::size_t v_, u_, a_, w_, b_;
};

}  // namespace

template <typename Scalar>
std::unique_ptr<Head<Scalar>> make_attentive_head(HeadKind kind, const HeadDims& dims, const HeadHyper& hyper) {
  switch (kind) {
    case HeadKind::mhca: return std::make_unique<MultiHeadCrossAttentionHead<Scalar>>(dims, hyper);
    case HeadKind::ep: return std::make_unique<EfficientProbeHead<Scalar>>(dims, hyper);
    case HeadKind::simpool: return std::make_unique<SimPoolHead<Scalar>>(dims, hyper);
    case HeadKind::abmilp: return std::make_unique<GatedAttentionMilHead<Scalar>>(dims, hyper);
    default: throw ConfigError("not an attentive head");
  }
}

template std::unique_ptr<Head<float>> make_attentive_head(HeadKind, const HeadDims&, const HeadHyper&);
template std::unique_ptr<Head<double>> make_attentive_head(HeadKind, const HeadDims&, const HeadHyper&);

}  // namespace protoprobe::detail
