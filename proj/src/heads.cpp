#include "protoprobe/heads.hpp"

#include <cmath>

#include "heads_impl.hpp"

namespace protoprobe {

std::string_view head_name(HeadKind kind) {
  switch (kind) {
    case HeadKind::linear: return "linear";
    case HeadKind::mlp: return "mlp";
    case HeadKind::linearc: return "linearc";
    case HeadKind::conv: return "conv";
    case HeadKind::mhca: return "mhca";
    case HeadKind::ep: return "ep";
    case HeadKind::simpool: return "simpool";
    case HeadKind::abmilp: return "abmilp";
    case HeadKind::proto: return "proto";
    case HeadKind::protobin: return "protobin";
  }
  return "?";
}

std::string valid_head_names() {
  std::string out;
  for (HeadKind k : kAllHeadKinds) {
    if (!out.empty()) out += ", ";
    out += head_name(k);
  }
  return out;
}

HeadKind parse_head_kind(std::string_view name) {
  for (HeadKind k : kAllHeadKinds) {
    if (head_name(k) == name) return k;
  }
  throw ConfigError("unknown head '" + std::string(name) + "'; valid heads: " + valid_head_names());
}

std::uint64_t param_count(HeadKind kind, const HeadDims& dims, const HeadHyper& hyper) {
  const auto D = static_cast<std::uint64_t>(dims.dim);
  const auto C = static_cast<std::uint64_t>(dims.classes);
  const auto N = static_cast<std::uint64_t>(dims.tokens());
  switch (kind) {
    case HeadKind::linear: return D * C + C;
    case HeadKind::mlp: {
      const auto H = static_cast<std::uint64_t>(hyper.mlp_hidden);
      return D * H + H + H * C + C;
    }
    case HeadKind::linearc: return N * D * C;
    case HeadKind::conv: {
      const auto k = static_cast<std::uint64_t>(hyper.conv_kernel);
      const auto Dh = static_cast<std::uint64_t>(hyper.conv_hidden);
      return k * k * D * Dh + Dh + Dh * C + C;
    }
    case HeadKind::mhca: return 2 * D * D + D + D * C + C;
    case HeadKind::ep: return D * C + static_cast<std::uint64_t>(hyper.ep_queries) * D;
    case HeadKind::simpool: return D * D + D * C + C;
    case HeadKind::abmilp: return 2 * D * D + static_cast<std::uint64_t>(hyper.abmilp_queries) * D + D * C + C;
    case HeadKind::proto:
    case HeadKind::protobin: {
      const auto J = static_cast<std::uint64_t>(hyper.prototypes_per_class) * C;
      return J * D + J * C;
    }
  }
  return 0;
}

// ---------------------------------------------------------------------------

template <typename Scalar>
Head<Scalar>::Head(HeadKind kind, const HeadDims& dims, const HeadHyper& hyper)
    : kind_(kind), dims_(dims), hyper_(hyper) {
  if (dims.dim <= 0 || dims.grid_t <= 0 || dims.grid_f <= 0 || dims.classes <= 0) {
    throw ConfigError("head dimensions must be positive");
  }
}

template <typename Scalar>
std::size_t Head<Scalar>::add_param(std::string name, Shape shape, Index fan_in, InitRule rule) {
  params_.push_back({name, Tensor<Scalar>(shape)});
  grads_.push_back({std::move(name), Tensor<Scalar>(std::move(shape))});
  init_.emplace_back(fan_in, rule);
  return params_.size() - 1;
}

template <typename Scalar>
Tensor<Scalar>& Head<Scalar>::param(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return p.value;
  }
  throw ConfigError(std::string(head_name(kind_)) + " has no parameter '" + std::string(name) + "'");
}

template <typename Scalar>
const Tensor<Scalar>& Head<Scalar>::param(std::string_view name) const {
  return const_cast<Head*>(this)->param(name);
}

template <typename Scalar>
const Tensor<Scalar>& Head<Scalar>::grad(std::string_view name) const {
  for (const auto& g : grads_) {
    if (g.name == name) return g.value;
  }
  throw ConfigError(std::string(head_name(kind_)) + " has no gradient '" + std::string(name) + "'");
}

template <typename Scalar>
std::uint64_t Head<Scalar>::param_count() const {
  std::uint64_t n = 0;
  for (const auto& p : params_) n += static_cast<std::uint64_t>(p.value.size());
  return n;
}

template <typename Scalar>
void Head<Scalar>::zero_grad() {
  for (auto& g : grads_) g.value.set_zero();
}

template <typename Scalar>
void Head<Scalar>::initialize(RngStream& rng) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& t = params_[i].value;
    const auto [fan_in, rule] = init_[i];
    if (rule == InitRule::fan_in_uniform) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (Index k = 0; k < t.size(); ++k) t[k] = static_cast<Scalar>(rng.uniform(-bound, bound));
    } else {
      auto m = t.matrix();
      for (Index r = 0; r < m.rows(); ++r) {
        double norm = 0.0;
        Vector<double> row(m.cols());
        do {
          for (Index c = 0; c < m.cols(); ++c) row(c) = rng.gaussian();
          norm = row.norm();
        } while (norm == 0.0);
        m.row(r) = (row / norm).cast<Scalar>().transpose();
      }
    }
  }
}

template <typename Scalar>
void Head<Scalar>::check_clip(const Clip<Scalar>& clip) const {
  if (clip.tokens.rows() != dims_.dim || clip.tokens.cols() != dims_.tokens() || clip.grid_t != dims_.grid_t ||
      clip.grid_f != dims_.grid_f) {
    throw DimensionError(std::string(head_name(kind_)) + ": clip token map " + shape_string({clip.tokens.rows(), clip.grid_t, clip.grid_f}) +
                         " does not match head " + shape_string({dims_.dim, dims_.grid_t, dims_.grid_f}));
  }
  if (reads_cls(kind_) && clip.cls.size() != dims_.dim) {
    throw DimensionError(std::string(head_name(kind_)) + ": cls length " + std::to_string(clip.cls.size()) +
                         " != D=" + std::to_string(dims_.dim));
  }
}

template <typename Scalar>
void Head<Scalar>::check_backward(const ProbeOutput<Scalar>& out, const Vector<Scalar>& dlogits) const {
  if (!out.ready) throw StateError(std::string(head_name(kind_)) + ": backward called without a forward pass");
  if (dlogits.size() != dims_.classes) {
    throw DimensionError(std::string(head_name(kind_)) + ": dlogits length " + std::to_string(dlogits.size()) +
                         " != C=" + std::to_string(dims_.classes));
  }
}

template <typename Scalar>
std::unique_ptr<Head<Scalar>> make_head(HeadKind kind, const HeadDims& dims, const HeadHyper& hyper) {
  switch (kind) {
    case HeadKind::linear:
    case HeadKind::mlp:
    case HeadKind::linearc:
    case HeadKind::conv: return detail::make_dense_head<Scalar>(kind, dims, hyper);
    case HeadKind::mhca:
    case HeadKind::ep:
    case HeadKind::simpool:
    case HeadKind::abmilp: return detail::make_attentive_head<Scalar>(kind, dims, hyper);
    case HeadKind::proto:
    case HeadKind::protobin: return detail::make_prototype_head<Scalar>(kind, dims, hyper);
  }
  throw ConfigError("unknown head kind");
}

template <typename Scalar>
Tensor<Scalar> flatten(const std::vector<NamedTensor<Scalar>>& tensors) {
  Index total = 0;
  for (const auto& t : tensors) total += t.value.size();
  Tensor<Scalar> out({std::max<Index>(total, 1)});
  if (total == 0) return out;
  Index off = 0;
  for (const auto& t : tensors) {
    out.flat().segment(off, t.value.size()) = t.value.flat();
    off += t.value.size();
  }
  return out;
}

template <typename Scalar>
void unflatten(const Tensor<Scalar>& flat, std::vector<NamedTensor<Scalar>>& tensors) {
  Index total = 0;
  for (const auto& t : tensors) total += t.value.size();
  if (flat.size() != total) {
    throw DimensionError("unflatten: " + std::to_string(flat.size()) + " values for " + std::to_string(total) +
                         " parameters");
  }
  Index off = 0;
  for (auto& t : tensors) {
    t.value.flat() = flat.flat().segment(off, t.value.size());
    off += t.value.size();
  }
}

// ---------------------------------------------------------------------------

template <typename Scalar>
std::vector<std::uint8_t> pack_prototypes(const Matrix<Scalar>& p_tilde) {
  const Index stride = (p_tilde.cols() + 7) / 8;
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(p_tilde.rows() * stride), 0);
  for (Index j = 0; j < p_tilde.rows(); ++j) {
    for (Index k = 0; k < p_tilde.cols(); ++k) {
      if (p_tilde(j, k) >= Scalar(0)) {
        bytes[static_cast<std::size_t>(j * stride + k / 8)] |= static_cast<std::uint8_t>(1u << (k % 8));
      }
    }
  }
  return bytes;
}

Matrix<float> unpack_prototypes(const std::vector<std::uint8_t>& bytes, Index count, Index dim) {
  if (bytes.size() != packed_prototype_bytes(count, dim)) {
    throw DimensionError("unpack_prototypes: " + std::to_string(bytes.size()) + " bytes for " +
                         std::to_string(count) + " x " + std::to_string(dim));
  }
  const Index stride = (dim + 7) / 8;
  Matrix<float> p(count, dim);
  for (Index j = 0; j < count; ++j) {
    for (Index k = 0; k < dim; ++k) {
      const bool bit = (bytes[static_cast<std::size_t>(j * stride + k / 8)] >> (k % 8)) & 1u;
      p(j, k) = bit ? 1.0f : -1.0f;
    }
  }
  return p;
}

template <typename Scalar>
PrototypeSimilarity prototype_similarity(const Matrix<Scalar>& p_tilde, bool binarized) {
  const Matrix<double> p = binarized ? Matrix<double>(binarize(p_tilde).template cast<double>())
                                     : Matrix<double>(p_tilde.template cast<double>());
  PrototypeSimilarity s;
  std::size_t pairs = 0;
  for (Index a = 0; a < p.rows(); ++a) {
    for (Index b = a + 1; b < p.rows(); ++b) {
      const double c = std::abs(cosine(p.row(a).transpose(), p.row(b).transpose()));
      s.mean_abs += c;
      s.max_abs = std::max(s.max_abs, c);
      ++pairs;
    }
  }
  if (pairs) s.mean_abs /= static_cast<double>(pairs);
  return s;
}

template class Head<float>;
template class Head<double>;
template std::unique_ptr<Head<float>> make_head(HeadKind, const HeadDims&, const HeadHyper&);
template std::unique_ptr<Head<double>> make_head(HeadKind, const HeadDims&, const HeadHyper&);
template Tensor<float> flatten(const std::vector<NamedTensor<float>>&);
template Tensor<double> flatten(const std::vector<NamedTensor<double>>&);
template void unflatten(const Tensor<float>&, std::vector<NamedTensor<float>>&);
template void unflatten(const Tensor<double>&, std::vector<NamedTensor<double>>&);
template std::vector<std::uint8_t> pack_prototypes(const Matrix<float>&);
template std::vector<std::uint8_t> pack_prototypes(const Matrix<double>&);
template PrototypeSimilarity prototype_similarity(const Matrix<float>&, bool);
template PrototypeSimilarity prototype_similarity(const Matrix<double>&, bool);

}  // namespace protoprobe
