#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "protoprobe/heads.hpp"
#include "protoprobe/numerics.hpp"
#include "protoprobe/rng.hpp"

namespace support {

using namespace protoprobe;

template <typename Scalar>
ClipData<Scalar> random_clip(RngStream& rng, const HeadDims& d) {
  ClipData<Scalar> c;
  c.grid_t = d.grid_t;
  c.grid_f = d.grid_f;
  c.tokens.resize(d.dim, d.tokens());
  for (Index i = 0; i < c.tokens.size(); ++i) c.tokens.data()[i] = static_cast<Scalar>(rng.gaussian());
  c.cls.resize(d.dim);
  for (Index i = 0; i < d.dim; ++i) c.cls(i) = static_cast<Scalar>(rng.gaussian());
  return c;
}

// Small hyperparameters so every head stays cheap at D = 8.
inline HeadHyper small_hyper() {
  HeadHyper h;
  h.mlp_hidden = 16;
  h.conv_hidden = 6;
  h.prototypes_per_class = 2;
  return h;
}

// Scalar objective over logits: r . y + |y|^2 / 2, gradient r + y.
struct LogitObjective {
  Vector<double> r;

  double value(const Vector<double>& y) const { return r.dot(y) + 0.5 * y.squaredNorm(); }
  Vector<double> grad(const Vector<double>& y) const { return r + y; }
};

/// Analytic gradient of LogitObjective through head.backward versus central differences.
/// protobin is checked against its identity-relaxed surrogate: the real-valued head evaluated
/// at sign(P0) + (P - P0), whose derivative at P0 is the straight-through gradient.
inline double head_grad_error(HeadKind kind, const HeadDims& dims, const HeadHyper& hyper, std::uint64_t seed,
                              double eps = 1e-6) {
  RngStream rng(seed, 77);
  auto head = make_initialized_head<double>(kind, dims, hyper, rng);
  // Push the prototypes away from sign boundaries so the relaxation is valid in a neighbourhood.
  if (kind == HeadKind::protobin) {
    auto& p = head->param("P");
    for (Index i = 0; i < p.size(); ++i) {
      while (std::abs(p[i]) < 10.0 * eps) p[i] = rng.gaussian();
    }
  }
  const auto clip = random_clip<double>(rng, dims);
  LogitObjective obj{Vector<double>(dims.classes)};
  for (Index k = 0; k < dims.classes; ++k) obj.r(k) = rng.gaussian();

  head->zero_grad();
  const auto out = head->forward(clip.view());
  head->backward(clip.view(), out, obj.grad(out.logits));
  const Tensor<double> theta0 = flatten(head->params());
  const Tensor<double> analytic = flatten(head->grads());

  std::unique_ptr<Head<double>> probe;
  std::function<double(const Tensor<double>&)> f;
  if (kind == HeadKind::protobin) {
    probe = convert_head<double>(*head, HeadKind::proto);
    const Tensor<double> p0 = head->param("P");
    f = [&, p0](const Tensor<double>& theta) {
      unflatten(theta, probe->params());
      auto& p = probe->param("P");
      for (Index i = 0; i < p.size(); ++i) p[i] = (p0[i] >= 0.0 ? 1.0 : -1.0) + (p[i] - p0[i]);
      return obj.value(probe->forward(clip.view()).logits);
    };
  } else {
    probe = convert_head<double>(*head);
    f = [&](const Tensor<double>& theta) {
      unflatten(theta, probe->params());
      return obj.value(probe->forward(clip.view()).logits);
    };
  }
  return grad_check<double>(f, theta0, analytic, eps);
}

/// Fresh scratch directory under the build tree.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("protoprobe_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace support
