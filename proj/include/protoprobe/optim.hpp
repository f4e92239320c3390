#pragma once

#include <cstdint>
#include <vector>

#include "protoprobe/heads.hpp"

namespace protoprobe {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// decoupled: theta -= lr * wd * theta alongside the moment step (AdamW).
/// coupled_l2: wd * theta is added to the gradient before the moments (classic Adam + L2).
enum class DecayMode { decoupled, coupled_l2 };

template <typename Scalar>
class AdamW {
 public:
  AdamW(const std::vector<NamedTensor<Scalar>>& params, double weight_decay, AdamHyper hyper = {},
        DecayMode mode = DecayMode::decoupled);

  /// One update with learning rate `lr`. Throws NumericError naming the tensor on a NaN/Inf gradient.
  void step(std::vector<NamedTensor<Scalar>>& params, const std::vector<NamedTensor<Scalar>>& grads, double lr);

  std::uint64_t steps() const { return t_; }
  double weight_decay() const { return weight_decay_; }
  const std::vector<Vector<Scalar>>& first_moments() const { return m_; }
  const std::vector<Vector<Scalar>>& second_moments() const { return v_; }

 private:
  double weight_decay_;
  AdamHyper hyper_;
  DecayMode mode_;
  std::uint64_t t_ = 0;
  std::vector<Vector<Scalar>> m_;
  std::vector<Vector<Scalar>> v_;
};

struct CosineSchedule {
  double lr_max = 1e-3;
  double lr_min = 0.0;
  std::uint64_t total_steps = 1;

  void validate() const;
};

/// lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total_steps)) / 2, step clamped to [0, total_steps].
double cosine_lr(std::uint64_t step, const CosineSchedule& sched);

}  // namespace protoprobe
