#include "mtunet/optim.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "mtunet/error.hpp"

namespace mtunet {

namespace {

std::pair<double, double> fans(const Shape& shape) {
  switch (shape.size()) {
    case 4: {
      const double receptive = static_cast<double>(shape[2] * shape[3]);
      return {static_cast<double>(shape[1]) * receptive, static_cast<double>(shape[0]) * receptive};
    }
    case 2:
      return {static_cast<double>(shape[0]), static_cast<double>(shape[1])};
    case 1:
      return {static_cast<double>(shape[0]), static_cast<double>(shape[0])};
    default:
      throw ConfigError("xavier_init: unsupported rank " + std::to_string(shape.size()));
  }
}

}  // namespace

double xavier_bound(const Shape& shape) {
  const auto [fan_in, fan_out] = fans(shape);
  return std::sqrt(6.0 / (fan_in + fan_out));
}

Tensor xavier_init(const Shape& shape, std::uint64_t seed) {
  const double bound = xavier_bound(shape);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(shape);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

double cosine_lr(std::size_t step, const CosineSchedule& schedule) {
  if (schedule.period == 0) throw ConfigError("cosine schedule period must be positive");
  const double phase = std::numbers::pi * static_cast<double>(step) / static_cast<double>(schedule.period);
  return schedule.min_rate + 0.5 * (schedule.base_rate - schedule.min_rate) * (1.0 + std::cos(phase));
}

void adagrad_step(std::span<Tensor* const> params, OptimizerState& state) {
  if (state.accumulators.empty()) {
    state.accumulators.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) state.accumulators[i].assign(params[i]->numel(), 0.0);
  }
  if (state.accumulators.size() != params.size()) throw ConfigError("optimizer state does not match parameters");
  const double lr = cosine_lr(state.step, state.schedule);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    if (!p.has_grad()) continue;
    auto grad = p.grad();
    auto values = p.data();
    auto& acc = state.accumulators[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      acc[j] += grad[j] * grad[j];
      values[j] -= lr * grad[j] / (std::sqrt(acc[j]) + state.eps);
    }
  }
  ++state.step;
}

}  // namespace mtunet
