#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace mtunet {

struct LossConfig {
  double gamma = 2.0;     // focal exponent
  double smooth = 1.0;    // SoftIoU stabiliser
  double epsilon = 1e-7;  // probabilities are clamped to [epsilon, 1 - epsilon] before logs
  /// Include dS/dp in the FocalIoU gradient. Off by default: S is held
  /// constant, as in the published derivation.
  bool differentiate_soft_iou = false;

  void validate() const;
};

struct LossOutput {
  double value = 0.0;
  std::vector<double> grad;  // dLoss/dx for logits x, p = sigmoid(x)
  double soft_iou = 0.0;
  double focal = 0.0;  // mean focal loss over pixels
};

/// Pixel-mean focal loss. `probabilities` are sigmoid outputs, `labels`
/// binary. Gradients are taken w.r.t. the logits behind `probabilities`;
/// the clamp passes gradients straight through so saturated wrong pixels
/// keep learning.
LossOutput focal_loss(std::span<const double> probabilities, std::span<const std::uint8_t> labels,
                      const LossConfig& config);

/// (smooth + sum p*y) / (smooth + sum p + sum y - sum p*y), on unclamped p.
double soft_iou(std::span<const double> probabilities, std::span<const std::uint8_t> labels,
                const LossConfig& config);

/// 2 (1 - S) FL^((1 + S)/2) with FL the pixel-mean focal loss and S the
/// joint SoftIoU of the whole batch.
LossOutput focal_iou_loss(std::span<const double> probabilities, std::span<const std::uint8_t> labels,
                          const LossConfig& config);

/// Negative SoftIoU (1 - S) with its exact gradient; used for comparisons.
LossOutput soft_iou_loss(std::span<const double> probabilities, std::span<const std::uint8_t> labels,
                         const LossConfig& config);

/// Per-pixel focal term and its derivative w.r.t. p, at clamped p.
double focal_term(double p, std::uint8_t y, double gamma);
double focal_term_derivative(double p, std::uint8_t y, double gamma);

}  // namespace mtunet
