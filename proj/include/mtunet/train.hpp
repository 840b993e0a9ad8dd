#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtunet/datapipe.hpp"
#include "mtunet/loss.hpp"
#include "mtunet/metrics.hpp"
#include "mtunet/model.hpp"
#include "mtunet/optim.hpp"

namespace mtunet {

enum class LossKind { focal_iou, focal, soft_iou };

LossKind parse_loss_kind(const std::string& name);
std::string to_string(LossKind kind);

struct TrainConfig {
  std::size_t steps = 500;
  std::size_t batch_size = 8;
  double learning_rate = 0.05;
  double min_learning_rate = 0.0;
  std::size_t period = 0;  // cosine period in steps; 0 means `steps`
  LossKind loss = LossKind::focal_iou;
  LossConfig loss_config;
  std::uint64_t seed = 0;
  bool augment = false;
  AugmentConfig augment_config;

  void validate() const;
  nlohmann::json to_json() const;
  /// Rejects unknown keys; missing keys keep their defaults.
  static TrainConfig from_json(const nlohmann::json& j);
};

struct StepRecord {
  std::size_t step = 0;  // 1-based
  double lr = 0.0;
  double loss = 0.0;
  double train_iou = 0.0;  // pixel IoU of the batch at p > 0.5
};

struct TrainResult {
  std::vector<StepRecord> history;
};

using StepCallback = std::function<void(const StepRecord&)>;

/// Image as a [1,H,W] tensor normalised to [0,1].
Tensor image_tensor(const Scene& scene);

LossOutput evaluate_loss(LossKind kind, std::span<const double> probabilities, std::span<const std::uint8_t> labels,
                         const LossConfig& config);

/// Adagrad with a cosine schedule. Each sample runs in its own graph; the
/// loss is computed on the concatenated batch so SoftIoU is joint.
TrainResult train(Model& model, const std::vector<Scene>& scenes, const TrainConfig& config,
                  const StepCallback& on_step = {});

/// "step,lr,loss,train_iou" with 9 significant digits.
void write_history_csv(std::ostream& out, const std::vector<StepRecord>& history);

/// Probability map for a whole scene: the image is tiled at the model's
/// input size, each tile predicted and the results stitched.
Raster<double> predict_scene(const Model& model, const Scene& scene);

/// Pooled detection counts at fixed tau over the given scenes.
DetectionReport evaluate_model(const Model& model, const std::vector<Scene>& scenes, double tau = 0.5,
                               double d_thresh = kDefaultCentroidThreshold);

/// Trailing moving average with the given window (shorter at the start).
std::vector<double> moving_average(std::span<const double> values, std::size_t window);

}  // namespace mtunet
