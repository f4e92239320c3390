// linear, mlp, linearc and conv probes.

#include "heads_impl.hpp"

namespace protoprobe::detail {
namespace {

template <typename Scalar>
class LinearHead final : public Head<Scalar> {
 public:
  LinearHead(const HeadDims& d, const HeadHyper& h) : Head<Scalar>(HeadKind::linear, d, h) {
    w_ = this->add_param("W", {d.classes, d.dim}, d.dim);
    b_ = this->add_param("b", {d.classes}, d.dim);
  }

  ProbeOutput<Scalar> forward(const Clip<Scalar>& clip) const override {
    this->check_clip(clip);
    ProbeOutput<Scalar> out;
    out.pooled = clip.cls;
    out.logits = this->pmat(w_) * out.pooled + this->pvec(b_);
    out.ready = true;
    return out;
  }

  void backward(const Clip<Scalar>&, const ProbeOutput<Scalar>& out, const Vector<Scalar>& dy) override {
    this->check_backward(out, dy);
    this->gmat(w_).noalias() += dy * out.pooled.transpose();
    this->gvec(b_) += dy;
  }

 private:
  std::size_t w_, b_;
};

template <typename Scalar>
class MlpHead final : public Head<Scalar> {
 public:
  MlpHead(const HeadDims& d, const HeadHyper& h) : Head<Scalar>(HeadKind::mlp, d, h) {
    if (h.mlp_hidden <= 0) throw ConfigError("mlp: hidden width must be positive");
    w1_ = this->add_param("W1", {h.mlp_hidden, d.dim}, d.dim);
    b1_ = this->add_param("b1", {h.mlp_hidden}, d.dim);
    w2_ = this->add_param("W2", {d.classes, h.mlp_hidden}, h.mlp_hidden);
    b2_ = this->add_param("b2", {d.classes}, h.mlp_hidden);
  }

  ProbeOutput<Scalar> forward(const Clip<Scalar>& clip) const override {
    this->check_clip(clip);
    ProbeOutput<Scalar> out;
    out.pooled = clip.cls;
    Vector<Scalar> pre = this->pmat(w1_) * out.pooled + this->pvec(b1_);
    Vector<Scalar> act = pre.cwiseMax(Scalar(0));
    out.logits = this->pmat(w2_) * act + this->pvec(b2_);
    out.vecs = {std::move(pre), std::move(act)};
    out.ready = true;
    return out;
  }

  void backward(const Clip<Scalar>&, const ProbeOutput<Scalar>& out, const Vector<Scalar>& dy) override {
    this->check_backward(out, dy);
    const Vector<Scalar>& pre = out.vecs[0];
    const Vector<Scalar>& act = out.vecs[1];
    this->gmat(w2_).noalias() += dy * act.transpose();
    this->gvec(b2_) += dy;
    Vector<Scalar> dpre = this->pmat(w2_).transpose() * dy;
    dpre = (pre.array() > Scalar(0)).select(dpre, Scalar(0));
    this->gmat(w1_).noalias() += dpre * out.pooled.transpose();
    this->gvec(b1_) += dpre;
  }

 private:
  std::size_t w1_, b1_, w2_, b2_;
};

// Flattens the whole (D, S_t, S_f) map in storage order and applies one linear map.
template <typename Scalar>
class LinearConcatHead final : public Head<Scalar> {
 public:
  LinearConcatHead(const HeadDims& d, const HeadHyper& h) : Head<Scalar>(HeadKind::linearc, d, h) {
    w_ = this->add_param("W", {d.classes, d.dim * d.tokens()}, d.dim * d.tokens());
  }

  ProbeOutput<Scalar> forward(const Clip<Scalar>& clip) const override {
    this->check_clip(clip);
    ProbeOutput<Scalar> out;
    out.pooled = ConstVectorMap<Scalar>(clip.tokens.data(), clip.tokens.size());
    out.logits = this->pmat(w_) * out.pooled;
    out.ready = true;
    return out;
  }

  void backward(const Clip<Scalar>&, const ProbeOutput<Scalar>& out, const Vector<Scalar>& dy) override {
    this->check_backward(out, dy);
    this->gmat(w_).noalias() += dy * out.pooled.transpose();
  }

 private:
  std::size_t w_;
};

// k x k same-padded convolution over the (S_t, S_f) grid, ReLU, global mean, linear.
template <typename Scalar>
class ConvHead final : public Head<Scalar> {
 public:
  ConvHead(const HeadDims& d, const HeadHyper& h) : Head<Scalar>(HeadKind::conv, d, h) {
    if (h.conv_kernel <= 0 || h.conv_kernel % 2 == 0) throw ConfigError("conv: kernel size must be odd and positive");
    if (h.conv_hidden <= 0) throw ConfigError("conv: hidden channels must be positive");
    const Index k = h.conv_kernel;
    kernel_ = this->add_param("K", {h.conv_hidden, d.dim, k, k}, d.dim * k * k);
    bias_ = this->add_param("c", {h.conv_hidden}, d.dim * k * k);
    w_ = this->add_param("W", {d.classes, h.conv_hidden}, h.conv_hidden);
    b_ = this->add_param("b", {d.classes}, h.conv_hidden);
  }

  ProbeOutput<Scalar> forward(const Clip<Scalar>& clip) const override {
    this->check_clip(clip);
    ProbeOutput<Scalar> out;
    Matrix<Scalar> patches = im2col(clip);
    Matrix<Scalar> pre = this->pmat(kernel_) * patches;
    pre.colwise() += this->pvec(bias_);
    out.pooled = pre.cwiseMax(Scalar(0)).rowwise().mean();
    out.logits = this->pmat(w_) * out.pooled + this->pvec(b_);
    out.mats = {std::move(patches), std::move(pre)};
    out.ready = true;
    return out;
  }

  void backward(const Clip<Scalar>&, const ProbeOutput<Scalar>& out, const Vector<Scalar>& dy) override {
    this->check_backward(out, dy);
    const Matrix<Scalar>& patches = out.mats[0];
    const Matrix<Scalar>& pre = out.mats[1];
    this->gmat(w_).noalias() += dy * out.pooled.transpose();
    this->gvec(b_) += dy;
    const Vector<Scalar> dmean = (this->pmat(w_).transpose() * dy) / static_cast<Scalar>(pre.cols());
    Matrix<Scalar> dpre = (pre.array() > Scalar(0)).select(dmean.replicate(1, pre.cols()), Scalar(0));
    this->gmat(kernel_).noalias() += dpre * patches.transpose();
    this->gvec(bias_) += dpre.rowwise().sum();
  }

 private:
  // Row (d * k + i) * k + j, column t * S_f + f holds z[d, t + i - r, f + j - r] (zero outside).
  Matrix<Scalar> im2col(const Clip<Scalar>& clip) const {
    const Index k = this->hyper().conv_kernel;
    const Index r = k / 2;
    const Index D = this->dims().dim;
    const Index St = clip.grid_t;
    const Index Sf = clip.grid_f;
    Matrix<Scalar> patches = Matrix<Scalar>::Zero(D * k * k, St * Sf);
    for (Index d = 0; d < D; ++d) {
      for (Index i = 0; i < k; ++i) {
        for (Index j = 0; j < k; ++j) {
          const Index row = (d * k + i) * k + j;
          for (Index t = 0; t < St; ++t) {
            const Index ts = t + i - r;
            if (ts < 0 || ts >= St) continue;
            for (Index f = 0; f < Sf; ++f) {
              const Index fs = f + j - r;
              if (fs < 0 || fs >= Sf) continue;
              patches(row, t * Sf + f) = clip.tokens(d, ts * Sf + fs);
            }
          }
        }
      }
    }
    return patches;
  }

  std::size_t kernel_, bias_, w_, b_;
};

}  // namespace

template <typename Scalar>
std::unique_ptr<Head<Scalar>> make_dense_head(HeadKind kind, const HeadDims& dims, const HeadHyper& hyper) {
  switch (kind) {
    case HeadKind::linear: return std::make_unique<LinearHead<Scalar>>(dims, hyper);
    case HeadKind::mlp: return std::make_unique<MlpHead<Scalar>>(dims, hyper);
    case HeadKind::linearc: return std::make_unique<LinearConcatHead<Scalar>>(dims, hyper);
    case HeadKind::conv: return std::make_unique<ConvHead<Scalar>>(dims, hyper);
    default: throw ConfigError("not a dense head");
  }
}

template std::unique_ptr<Head<float>> make_dense_head(HeadKind, const HeadDims&, const HeadHyper&);
template std::unique_ptr<Head<double>> make_dense_head(HeadKind, const HeadDims&, const HeadHyper&);

}  // namespace protoprobe::detail
