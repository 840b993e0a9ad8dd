#include "mtunet/loss.hpp"

#include <algorithm>
#include <cmath>

#include "mtunet/error.hpp"

namespace mtunet {

namespace {

void check_inputs(std::span<const double> p, std::span<const std::uint8_t> y) {
  if (p.size() != y.size()) {
    throw DataError("loss: prediction has " + std::to_string(p.size()) + " pixels, label has " +
                    std::to_string(y.size()));
  }
  if (p.empty()) throw DataError("loss: empty input");
}

double clamp_probability(double p, double eps) { return std::clamp(p, eps, 1.0 - eps); }

struct IouSums {
  double intersection = 0.0, predicted = 0.0, labelled = 0.0;
};

IouSums iou_sums(std::span<const double> p, std::span<const std::uint8_t> y) {
  IouSums s;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double yi = y[i] ? 1.0 : 0.0;
    s.intersection += p[i] * yi;
    s.predicted += p[i];
    s.labelled += yi;
  }
  return s;
}

}  // namespace

void LossConfig::validate() const {
  if (!(gamma >= 0.0)) throw ConfigError("loss: gamma must be >= 0");
  if (!(smooth > 0.0)) throw ConfigError("loss: smooth must be > 0");
  if (!(epsilon > 0.0 && epsilon < 0.5)) throw ConfigError("loss: epsilon must be in (0, 0.5)");
}

double focal_term(double p, std::uint8_t y, double gamma) {
  return y ? -std::pow(1.0 - p, gamma) * std::log(p) : -std::pow(p, gamma) * std::log(1.0 - p);
}

double focal_term_derivative(double p, std::uint8_t y, double gamma) {
  if (y) {
    const double lead = gamma == 0.0 ? 0.0 : gamma * std::pow(1.0 - p, gamma - 1.0) * std::log(p);
    return lead - std::pow(1.0 - p, gamma) / p;
  }
  const double lead = gamma == 0.0 ? 0.0 : -gamma * std::pow(p, gamma - 1.0) * std::log(1.0 - p);
  return lead + std::pow(p, gamma) / (1.0 - p);
}

LossOutput focal_loss(std::span<const double> p, std::span<const std::uint8_t> y, const LossConfig& config) {
  config.validate();
  check_inputs(p, y);
  const double n = static_cast<double>(p.size());
  LossOutput out;
  out.grad.resize(p.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pc = clamp_probability(p[i], config.epsilon);
    total += focal_term(pc, y[i], config.gamma);
    out.grad[i] = focal_term_derivative(pc, y[i], config.gamma) * p[i] * (1.0 - p[i]) / n;
  }
  out.focal = out.value = total / n;
  out.soft_iou = soft_iou(p, y, config);
  return out;
}

double soft_iou(std::span<const double> p, std::span<const std::uint8_t> y, const LossConfig& config) {
  config.validate();
  check_inputs(p, y);
  const auto s = iou_sums(p, y);
  return (config.smooth + s.intersection) / (config.smooth + s.predicted + s.labelled - s.intersection);
}

LossOutput focal_iou_loss(std::span<const double> p, std::span<const std::uint8_t> y, const LossConfig& config) {
  LossOutput focal = focal_loss(p, y, config);
  const double s = focal.soft_iou;
  const double fl = focal.focal;
  const double exponent = 0.5 * (1.0 + s);

  LossOutput out;
  out.focal = fl;
  out.soft_iou = s;
  out.value = 2.0 * (1.0 - s) * std::pow(fl, exponent);
  // d/dFL of 2(1-S) FL^((1+S)/2) = (1 - S^2) FL^((S-1)/2).
  const double d_focal = (1.0 - s * s) * std::pow(fl, 0.5 * (s - 1.0));
  out.grad = std::move(focal.grad);
  for (double& g : out.grad) g *= d_focal;

  if (config.differentiate_soft_iou) {
    // dF/dS = FL^a (-2 + (1 - S) ln FL); dS/dp_j from the quotient rule.
    const double d_s = std::pow(fl, exponent) * (-2.0 + (1.0 - s) * std::log(fl));
    const auto sums = iou_sums(p, y);
    const double num = config.smooth + sums.intersection;
    const double den = config.smooth + sums.predicted + sums.labelled - sums.intersection;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double yi = y[i] ? 1.0 : 0.0;
      const double ds_dp = (yi * den - num * (1.0 - yi)) / (den * den);
      out.grad[i] += d_s * ds_dp * p[i] * (1.0 - p[i]);
    }
  }
  return out;
}

LossOutput soft_iou_loss(std::span<const double> p, std::span<const std::uint8_t> y, const LossConfig& config) {
  config.validate();
  check_inputs(p, y);
  const auto sums = iou_sums(p, y);
  const double num = config.smooth + sums.intersection;
  const double den = config.smooth + sums.predicted + sums.labelled - sums.intersection;
  LossOutput out;
  out.soft_iou = num / den;
  out.value = 1.0 - out.soft_iou;
  out.grad.resize(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double yi = y[i] ? 1.0 : 0.0;
    out.grad[i] = -(yi * den - num * (1.0 - yi)) / (den * den) * p[i] * (1.0 - p[i]);
  }
  return out;
}

}  // namespace mtunet
