#include "protoprobe/optim.hpp"

#include <cmath>
#include <numbers>

namespace protoprobe {

template <typename Scalar>
AdamW<Scalar>::AdamW(const std::vector<NamedTensor<Scalar>>& params, double weight_decay, AdamHyper hyper,
                     DecayMode mode)
    : weight_decay_(weight_decay), hyper_(hyper), mode_(mode) {
  if (!(hyper.beta1 >= 0.0 && hyper.beta1 < 1.0) || !(hyper.beta2 >= 0.0 && hyper.beta2 < 1.0)) {
    throw ConfigError("adamw: betas must lie in [0, 1)");
  }
  if (!(weight_decay >= 0.0)) throw ConfigError("adamw: weight decay must be >= 0");
  for (const auto& p : params) {
    m_.push_back(Vector<Scalar>::Zero(p.value.size()));
    v_.push_back(Vector<Scalar>::Zero(p.value.size()));
  }
}

template <typename Scalar>
void AdamW<Scalar>::step(std::vector<NamedTensor<Scalar>>& params, const std::vector<NamedTensor<Scalar>>& grads,
                         double lr) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw DimensionError("adamw: optimizer tracks " + std::to_string(m_.size()) + " tensors, got " +
                         std::to_string(params.size()) + " params and " + std::to_string(grads.size()) + " grads");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].value.size() != m_[i].size() || grads[i].value.shape() != params[i].value.shape()) {
      throw DimensionError("adamw: shape mismatch for '" + params[i].name + "'");
    }
    if (!grads[i].value.all_finite()) throw NumericError("adamw: non-finite gradient in '" + grads[i].name + "'");
  }
  ++t_;
  const double b1 = hyper_.beta1;
  const double b2 = hyper_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].value.flat();
    const auto g = grads[i].value.flat();
    auto& m = m_[i];
    auto& v = v_[i];
    for (Index k = 0; k < theta.size(); ++k) {
      const double th = static_cast<double>(theta(k));
      double gk = static_cast<double>(g(k));
      if (mode_ == DecayMode::coupled_l2) gk += weight_decay_ * th;
      const double mk = b1 * static_cast<double>(m(k)) + (1.0 - b1) * gk;
      const double vk = b2 * static_cast<double>(v(k)) + (1.0 - b2) * gk * gk;
      m(k) = static_cast<Scalar>(mk);
      v(k) = static_cast<Scalar>(vk);
      const double m_hat = mk / c1;
      const double v_hat = vk / c2;
      double next = th - lr * m_hat / (std::sqrt(v_hat) + hyper_.eps);
      if (mode_ == DecayMode::decoupled) next -= lr * weight_decay_ * th;
      theta(k) = static_cast<Scalar>(next);
    }
  }
}

void CosineSchedule::validate() const {
  if (!(lr_min <= lr_max)) throw ConfigError("cosine schedule: lr_min must not exceed lr_max");
  if (total_steps < 1) throw ConfigError("cosine schedule: total_steps must be >= 1");
}

double cosine_lr(std::uint64_t step, const CosineSchedule& sched) {
  sched.validate();
  const double s = static_cast<double>(std::min(step, sched.total_steps));
  const double frac = s / static_cast<double>(sched.total_steps);
  return sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace protoprobe
