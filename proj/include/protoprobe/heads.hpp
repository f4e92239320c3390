#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "protoprobe/numerics.hpp"
#include "protoprobe/rng.hpp"

namespace protoprobe {

/// The ten pooling probes. linear and mlp read the cls descriptor; every other
/// head reads the full token map.
enum class HeadKind { linear, mlp, linearc, conv, mhca, ep, simpool, abmilp, proto, protobin };

inline constexpr std::array<HeadKind, 10> kAllHeadKinds{
    HeadKind::linear, HeadKind::mlp,     HeadKind::linearc, HeadKind::conv,  HeadKind::mhca,
    HeadKind::ep,     HeadKind::simpool, HeadKind::abmilp,  HeadKind::proto, HeadKind::protobin};

std::string_view head_name(HeadKind kind);
/// Throws ConfigError listing the valid names.
HeadKind parse_head_kind(std::string_view name);
std::string valid_head_names();

inline bool is_prototype_head(HeadKind k) { return k == HeadKind::proto || k == HeadKind::protobin; }
inline bool reads_cls(HeadKind k) { return k == HeadKind::linear || k == HeadKind::mlp; }

struct HeadDims {
  Index dim = 0;
  Index grid_t = 0;
  Index grid_f = 0;
  Index classes = 0;

  Index tokens() const { return grid_t * grid_f; }
  friend bool operator==(const HeadDims&, const HeadDims&) = default;
};

struct HeadHyper {
  Index mlp_hidden = 512;
  Index conv_kernel = 3;  // odd
  Index conv_hidden = 256;
  Index mhca_heads = 4;
  Index ep_queries = 2;
  Index abmilp_queries = 1;
  Index prototypes_per_class = 20;

  friend bool operator==(const HeadHyper&, const HeadHyper&) = default;
};

/// Closed-form parameter budget of a head.
///   linear    DC + C           mlp      DH + H + HC + C
///   linearc   NDC              conv     k^2 D D_h + D_h + D_h C + C
///   mhca      2D^2 + D + DC + C
///   ep        DC + QD (Q = ep_queries, default 2)
///   simpool   D^2 + DC + C     abmilp   2D^2 + QD + DC + C
///   proto, protobin            JD + JC
std::uint64_t param_count(HeadKind kind, const HeadDims& dims, const HeadHyper& hyper);

/// Non-owning view of one clip. `tokens` is (D, N) with column n = t * S_f + f.
template <typename Scalar>
struct Clip {
  ConstMatrixMap<Scalar> tokens;
  ConstVectorMap<Scalar> cls;
  Index grid_t;
  Index grid_f;
};

/// Owning clip, mostly for tests and tools.
template <typename Scalar>
struct ClipData {
  Matrix<Scalar> tokens;
  Vector<Scalar> cls;
  Index grid_t = 0;
  Index grid_f = 0;

  Clip<Scalar> view() const {
    return Clip<Scalar>{ConstMatrixMap<Scalar>(tokens.data(), tokens.rows(), tokens.cols()),
                        ConstVectorMap<Scalar>(cls.data(), cls.size()), grid_t, grid_f};
  }
};

template <typename Scalar>
struct ProbeOutput {
  Vector<Scalar> logits;
  /// The head's clip descriptor; for prototype heads the max-pooled scores in [-1, 1].
  Vector<Scalar> pooled;
  /// Prototype heads: winning token index (t * S_f + f) per prototype.
  std::vector<Index> argmax;

  // Intermediates consumed by backward.
  bool ready = false;
  std::vector<Matrix<Scalar>> mats;
  std::vector<Vector<Scalar>> vecs;
};

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar> value;
};

enum class InitRule { fan_in_uniform, unit_rows };

template <typename Scalar>
class Head {
 public:
  virtual ~Head() = default;

  HeadKind kind() const { return kind_; }
  const HeadDims& dims() const { return dims_; }
  const HeadHyper& hyper() const { return hyper_; }

  std::vector<NamedTensor<Scalar>>& params() { return params_; }
  const std::vector<NamedTensor<Scalar>>& params() const { return params_; }
  std::vector<NamedTensor<Scalar>>& grads() { return grads_; }
  const std::vector<NamedTensor<Scalar>>& grads() const { return grads_; }

  Tensor<Scalar>& param(std::string_view name);
  const Tensor<Scalar>& param(std::string_view name) const;
  const Tensor<Scalar>& grad(std::string_view name) const;

  std::uint64_t param_count() const;
  void zero_grad();

  /// Dense weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); prototypes are unit-norm gaussians.
  void initialize(RngStream& rng);

  virtual ProbeOutput<Scalar> forward(const Clip<Scalar>& clip) const = 0;

  /// Accumulates d(loss)/d(params) into grads(), given d(loss)/d(logits).
  /// `out` must come from forward() on the same clip with unchanged parameters.
  virtual void backward(const Clip<Scalar>& clip, const ProbeOutput<Scalar>& out, const Vector<Scalar>& dlogits) = 0;

 protected:
  Head(HeadKind kind, const HeadDims& dims, const HeadHyper& hyper);

  std::size_t add_param(std::string name, Shape shape, Index fan_in, InitRule rule = InitRule::fan_in_uniform);

  void check_clip(const Clip<Scalar>& clip) const;
  void check_backward(const ProbeOutput<Scalar>& out, const Vector<Scalar>& dlogits) const;

  MatrixMap<Scalar> pmat(std::size_t i) { return params_[i].value.matrix(); }
  ConstMatrixMap<Scalar> pmat(std::size_t i) const { return params_[i].value.matrix(); }
  VectorMap<Scalar> pvec(std::size_t i) { return params_[i].value.flat(); }
  ConstVectorMap<Scalar> pvec(std::size_t i) const { return params_[i].value.flat(); }
  MatrixMap<Scalar> gmat(std::size_t i) { return grads_[i].value.matrix(); }
  VectorMap<Scalar> gvec(std::size_t i) { return grads_[i].value.flat(); }

 private:
  HeadKind kind_;
  HeadDims dims_;
  HeadHyper hyper_;
  std::vector<NamedTensor<Scalar>> params_;
  std::vector<NamedTensor<Scalar>> grads_;
  std::vector<std::pair<Index, InitRule>> init_;
};

/// Builds a zero-initialised head; call initialize() for the seeded start point.
template <typename Scalar>
std::unique_ptr<Head<Scalar>> make_head(HeadKind kind, const HeadDims& dims, const HeadHyper& hyper = {});

template <typename Scalar>
std::unique_ptr<Head<Scalar>> make_initialized_head(HeadKind kind, const HeadDims& dims, const HeadHyper& hyper,
                                                    RngStream& rng) {
  auto head = make_head<Scalar>(kind, dims, hyper);
  head->initialize(rng);
  return head;
}

/// Same kind and parameter values, converted to another scalar type.
template <typename To, typename From>
std::unique_ptr<Head<To>> convert_head(const Head<From>& head, HeadKind as_kind) {
  auto out = make_head<To>(as_kind, head.dims(), head.hyper());
  for (std::size_t i = 0; i < head.params().size(); ++i) {
    out->params()[i].value = head.params()[i].value.template cast<To>();
  }
  return out;
}
template <typename To, typename From>
std::unique_ptr<Head<To>> convert_head(const Head<From>& head) {
  return convert_head<To>(head, head.kind());
}

/// Concatenation of every parameter (or gradient) tensor in declaration order.
template <typename Scalar>
Tensor<Scalar> flatten(const std::vector<NamedTensor<Scalar>>& tensors);
template <typename Scalar>
void unflatten(const Tensor<Scalar>& flat, std::vector<NamedTensor<Scalar>>& tensors);

// Prototype helpers.

/// Elementwise sign with sign(0) := +1.
template <typename Derived>
auto binarize(const Eigen::MatrixBase<Derived>& p_tilde) {
  using S = typename Derived::Scalar;
  return p_tilde.unaryExpr([](S x) { return x >= S(0) ? S(1) : S(-1); });
}

/// One bit per weight (1 = +1), row-major, each prototype padded to whole bytes,
/// bit k of a prototype at bit (k % 8) of its byte (k / 8).
template <typename Scalar>
std::vector<std::uint8_t> pack_prototypes(const Matrix<Scalar>& p_tilde);
Matrix<float> unpack_prototypes(const std::vector<std::uint8_t>& bytes, Index count, Index dim);
inline std::size_t packed_prototype_bytes(Index count, Index dim) {
  return static_cast<std::size_t>(count) * static_cast<std::size_t>((dim + 7) / 8);
}

/// Mean and max |cos| over distinct prototype pairs after binarization.
struct PrototypeSimilarity {
  double mean_abs = 0.0;
  double max_abs = 0.0;
};
template <typename Scalar>
PrototypeSimilarity prototype_similarity(const Matrix<Scalar>& p_tilde, bool binarized);

}  // namespace protoprobe
