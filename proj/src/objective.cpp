#include "protoprobe/objective.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace protoprobe {

void AslConfig::validate() const {
  if (!(gamma_pos >= 0.0) || !(gamma_neg >= 0.0)) throw ConfigError("asl: focusing exponents must be >= 0");
  if (!(margin >= 0.0 && margin < 1.0)) throw ConfigError("asl: margin must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("asl: eps must be > 0");
}

namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// x^g and d/dx x^g with 0^0 := 1 and a zero derivative where g == 0.
double power(double x, double g) { return g == 0.0 ? 1.0 : std::pow(x, g); }
double power_slope(double x, double g) { return g == 0.0 ? 0.0 : g * std::pow(x, g - 1.0); }

}  // namespace

LossResult asl_loss(std::span<const double> logits, std::span<const std::uint8_t> labels, const AslConfig& cfg) {
  if (logits.size() != labels.size()) {
    throw DimensionError("asl_loss: " + std::to_string(logits.size()) + " logits vs " +
                         std::to_string(labels.size()) + " labels");
  }
  if (logits.empty()) throw DimensionError("asl_loss: no classes");
  LossResult r;
  r.dlogits.resize(logits.size());
  const double inv_c = 1.0 / static_cast<double>(logits.size());
  for (std::size_t c = 0; c < logits.size(); ++c) {
    if (!std::isfinite(logits[c])) throw NumericError("asl_loss: non-finite logit at class " + std::to_string(c));
    if (labels[c] > 1) throw RangeError("asl_loss: label " + std::to_string(labels[c]) + " at class " + std::to_string(c));
    const double p = sigmoid(logits[c]);
    const double dp_dx = p * (1.0 - p);
    double term = 0.0;
    double dterm_dp = 0.0;
    if (labels[c]) {
      const double q = 1.0 - p;
      const bool floored = p < cfg.eps;
      const double logp = std::log(floored ? cfg.eps : p);
      term = -power(q, cfg.gamma_pos) * logp;
      // d/dp of -(1-p)^g log p
      dterm_dp = power_slope(q, cfg.gamma_pos) * logp - (floored ? 0.0 : power(q, cfg.gamma_pos) / p);
    } else {
      const double pm = std::max(p - cfg.margin, 0.0);
      const double q = 1.0 - pm;
      const bool floored = q < cfg.eps;
      const double logq = std::log(floored ? cfg.eps : q);
      term = -power(pm, cfg.gamma_neg) * logq;
      if (p > cfg.margin) {
        dterm_dp = -power_slope(pm, cfg.gamma_neg) * logq + (floored ? 0.0 : power(pm, cfg.gamma_neg) / q);
      }
    }
    r.loss += term * inv_c;
    r.dlogits[c] = dterm_dp * dp_dx * inv_c;
  }
  return r;
}

std::optional<double> average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) {
    throw DimensionError("average_precision: " + std::to_string(scores.size()) + " scores vs " +
                         std::to_string(labels.size()) + " labels");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double hits = 0.0;
  double sum = 0.0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (labels[order[rank]]) {
      hits += 1.0;
      sum += hits / static_cast<double>(rank + 1);
    }
  }
  if (hits == 0.0) return std::nullopt;
  return sum / hits;
}

double mean_average_precision(const Matrix<double>& scores, const Matrix<std::uint8_t>& labels) {
  if (scores.rows() != labels.rows() || scores.cols() != labels.cols()) {
    throw DimensionError("mean_average_precision: scores " + shape_string({scores.rows(), scores.cols()}) +
                         " vs labels " + shape_string({labels.rows(), labels.cols()}));
  }
  double sum = 0.0;
  Index counted = 0;
  std::vector<double> s(static_cast<std::size_t>(scores.rows()));
  std::vector<std::uint8_t> l(static_cast<std::size_t>(scores.rows()));
  for (Index c = 0; c < scores.cols(); ++c) {
    for (Index i = 0; i < scores.rows(); ++i) {
      s[static_cast<std::size_t>(i)] = scores(i, c);
      l[static_cast<std::size_t>(i)] = labels(i, c);
    }
    if (auto ap = average_precision(s, l)) {
      sum += *ap;
      ++counted;
    }
  }
  if (counted == 0) throw DegenerateError("mean_average_precision: no class has a positive label");
  return sum / static_cast<double>(counted);
}

double top1_accuracy(const Matrix<double>& scores, std::span<const Index> targets) {
  if (static_cast<Index>(targets.size()) != scores.rows()) {
    throw DimensionError("top1_accuracy: " + std::to_string(scores.rows()) + " rows vs " +
                         std::to_string(targets.size()) + " targets");
  }
  if (targets.empty()) throw DegenerateError("top1_accuracy: no examples");
  std::size_t correct = 0;
  for (Index i = 0; i < scores.rows(); ++i) {
    Index best = 0;
    for (Index c = 1; c < scores.cols(); ++c) {
      if (scores(i, c) > scores(i, best)) best = c;
    }
    if (best == targets[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(targets.size());
}

}  // namespace protoprobe
