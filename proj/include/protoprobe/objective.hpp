#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "protoprobe/numerics.hpp"

namespace protoprobe {

/// Asymmetric multi-label loss constants.
struct AslConfig {
  double gamma_pos = 0.0;
  double gamma_neg = 4.0;
  double margin = 0.05;  // probability shift applied to negatives
  double eps = 1e-8;     // floor inside the logarithms

  void validate() const;
};

struct LossResult {
  double loss = 0.0;
  std::vector<double> dlogits;
};

/// Mean over classes of
///   positive:  -(1 - p)^gamma_pos * log(max(p, eps))
///   negative:  -p_m^gamma_neg * log(max(1 - p_m, eps)),  p_m = max(p - margin, 0)
/// with p = sigmoid(logit), plus its exact gradient with respect to the logits.
LossResult asl_loss(std::span<const double> logits, std::span<const std::uint8_t> labels, const AslConfig& cfg = {});

/// AP with scores ranked descending, ties kept in original order.
/// Returns nullopt when there is no positive label.
std::optional<double> average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Macro mAP over classes with at least one positive. `scores` and `labels` are
/// (N, C) row-major. Throws DegenerateError if no class has a positive.
double mean_average_precision(const Matrix<double>& scores, const Matrix<std::uint8_t>& labels);

/// Fraction of rows whose argmax (first on ties) equals the target.
double top1_accuracy(const Matrix<double>& scores, std::span<const Index> targets);

}  // namespace protoprobe
