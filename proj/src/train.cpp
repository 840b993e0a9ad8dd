#include "mtunet/train.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <random>

namespace mtunet {

LossKind parse_loss_kind(const std::string& name) {
  if (name == "focal_iou") return LossKind::focal_iou;
  if (name == "focal") return LossKind::focal;
  if (name == "soft_iou") return LossKind::soft_iou;
  throw ConfigError("unknown loss '" + name + "' (expected focal_iou, focal or soft_iou)");
}

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::focal_iou: return "focal_iou";
    case LossKind::focal: return "focal";
    case LossKind::soft_iou: return "soft_iou";
  }
  return "focal_iou";
}

void TrainConfig::validate() const {
  if (steps == 0) throw ConfigError("train: steps must be positive");
  if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be positive");
  if (min_learning_rate < 0.0 || min_learning_rate > learning_rate) {
    throw ConfigError("train: min_learning_rate must be in [0, learning_rate]");
  }
  loss_config.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"steps", steps},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"min_learning_rate", min_learning_rate},
          {"period", period},
          {"loss", to_string(loss)},
          {"gamma", loss_config.gamma},
          {"smooth", loss_config.smooth},
          {"epsilon", loss_config.epsilon},
          {"differentiate_soft_iou", loss_config.differentiate_soft_iou},
          {"seed", seed},
          {"augment", augment},
          {"flip_probability", augment_config.flip_probability},
          {"blur_sigma", augment_config.blur_sigma}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  TrainConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "steps") c.steps = value.get<std::size_t>();
      else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "learning_rate") c.learning_rate = value.get<double>();
      else if (key == "min_learning_rate") c.min_learning_rate = value.get<double>();
      else if (key == "period") c.period = value.get<std::size_t>();
      else if (key == "loss") c.loss = parse_loss_kind(value.get<std::string>());
      else if (key == "gamma") c.loss_config.gamma = value.get<double>();
      else if (key == "smooth") c.loss_config.smooth = value.get<double>();
      else if (key == "epsilon") c.loss_config.epsilon = value.get<double>();
      else if (key == "differentiate_soft_iou") c.loss_config.differentiate_soft_iou = value.get<bool>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "augment") c.augment = value.get<bool>();
      else if (key == "flip_probability") c.augment_config.flip_probability = value.get<double>();
      else if (key == "blur_sigma") c.augment_config.blur_sigma = value.get<double>();
      else throw ConfigError("train config: unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

Tensor image_tensor(const Scene& scene) {
  const auto norm = normalize(scene.image);
  return Tensor({1, norm.height, norm.width}, norm.data);
}

LossOutput evaluate_loss(LossKind kind, std::span<const double> probabilities, std::span<const std::uint8_t> labels,
                         const LossConfig& config) {
  switch (kind) {
    case LossKind::focal: return focal_loss(probabilities, labels, config);
    case LossKind::soft_iou: return soft_iou_loss(probabilities, labels, config);
    case LossKind::focal_iou: break;
  }
  return focal_iou_loss(probabilities, labels, config);
}

TrainResult train(Model& model, const std::vector<Scene>& scenes, const TrainConfig& config,
                  const StepCallback& on_step) {
  config.validate();
  if (scenes.empty()) throw DataError("train: no scenes");
  const std::size_t size = model.config().input_size;
  for (const auto& s : scenes) {
    s.validate();
    if (s.image.height != size || s.image.width != size) {
      throw DataError("train: scene '" + s.id + "' is not " + std::to_string(size) + "x" + std::to_string(size) +
                      "; tile it first");
    }
  }

  OptimizerState opt;
  opt.schedule = {config.learning_rate, config.min_learning_rate, config.period == 0 ? config.steps : config.period};
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const auto params = model.parameter_ptrs();

  TrainResult result;
  const std::size_t batch = std::min(config.batch_size, scenes.size());
  const std::size_t pixels = size * size;
  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<Graph> graphs(batch);
    std::vector<Var> logits(batch);
    std::vector<double> probs(batch * pixels);
    std::vector<std::uint8_t> labels(batch * pixels);
    model.zero_grad();
    for (std::size_t b = 0; b < batch; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const Scene* scene = &scenes[order[cursor++]];
      Scene augmented;
      if (config.augment) {
        augmented = classic_augment(*scene, config.augment_config,
                                    derive_seed(config.seed, scene->id + "#" + std::to_string(step)));
        scene = &augmented;
      }
      ModelGraph mg(graphs[b], model);
      const auto out = mg.forward(graphs[b].constant(image_tensor(*scene))).output;
      logits[b] = out.logits;
      const auto p = graphs[b].value(out.probability).data();
      std::copy(p.begin(), p.end(), probs.begin() + static_cast<std::ptrdiff_t>(b * pixels));
      std::copy(scene->mask.data.begin(), scene->mask.data.end(),
                labels.begin() + static_cast<std::ptrdiff_t>(b * pixels));
    }

    const LossOutput loss = evaluate_loss(config.loss, probs, labels, config.loss_config);
    if (!std::isfinite(loss.value)) throw NumericError("train: non-finite loss at step " + std::to_string(step + 1));
    for (std::size_t b = 0; b < batch; ++b) {
      graphs[b].backward(logits[b], std::span<const double>(loss.grad).subspan(b * pixels, pixels));
      graphs[b].accumulate_parameter_grads();
    }

    StepRecord rec;
    rec.step = step + 1;
    rec.lr = cosine_lr(opt.step, opt.schedule);
    rec.loss = loss.value;
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      const bool p = probs[i] > 0.5, y = labels[i] != 0;
      inter += p && y;
      uni += p || y;
    }
    rec.train_iou = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    adagrad_step(params, opt);
    for (const Tensor* t : params) t->check_finite("train: parameter update");
    result.history.push_back(rec);
    if (on_step) on_step(rec);
  }
  model.zero_grad();
  return result;
}

void write_history_csv(std::ostream& out, const std::vector<StepRecord>& history) {
  out << "step,lr,loss,train_iou\n";
  char line[128];
  for (const auto& r : history) {
    std::snprintf(line, sizeof line, "%zu,%.9g,%.9g,%.9g\n", r.step, r.lr, r.loss, r.train_iou);
    out << line;
  }
}

Raster<double> predict_scene(const Model& model, const Scene& scene) {
  scene.validate();
  const auto norm = normalize(scene.image);
  auto tiles = tile(norm, model.config().input_size);
  for (auto& t : tiles.tiles) {
    Tensor input({1, t.raster.height, t.raster.width}, t.raster.data);
    t.raster = model.predict(input).values;
  }
  return stitch(tiles);
}

DetectionReport evaluate_model(const Model& model, const std::vector<Scene>& scenes, double tau, double d_thresh) {
  DetectionCounts counts;
  for (const auto& s : scenes) counts += count_detections(s.mask, threshold(predict_scene(model, s), tau), d_thresh);
  return make_report(counts, d_thresh);
}

std::vector<double> moving_average(std::span<const double> values, std::size_t window) {
  if (window == 0) throw ConfigError("moving_average: window must be positive");
  std::vector<double> out(values.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    sum += values[i];
    if (i >= window) sum -= values[i - window];
    out[i] = sum / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

}  // namespace mtunet
