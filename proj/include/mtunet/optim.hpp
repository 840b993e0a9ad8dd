#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "mtunet/tensor.hpp"

namespace mtunet {

/// Uniform samples in +-sqrt(6/(fan_in+fan_out)).
///
/// Fans follow the tensor layout used throughout the model: rank-4 conv
/// weights [out,in,kh,kw] use in*kh*kw / out*kh*kw, rank-2 weights
/// [d_in,d_out] use d_in / d_out, rank-1 tensors use their length for both.
Tensor xavier_init(const Shape& shape, std::uint64_t seed);
double xavier_bound(const Shape& shape);

/// CosineAnnealingLR: min + (base - min) * (1 + cos(pi * step / period)) / 2.
struct CosineSchedule {
  double base_rate = 0.05;
  double min_rate = 0.0;
  std::size_t period = 1;
};

double cosine_lr(std::size_t step, const CosineSchedule& schedule);

struct OptimizerState {
  std::vector<std::vector<double>> accumulators;  // sum of squared grads, per parameter
  std::size_t step = 0;
  CosineSchedule schedule;
  double eps = 1e-10;
};

/// One Adagrad update at the scheduled rate for `state.step`, then advances
/// the step counter. Parameters without a gradient buffer are left alone.
/// Gradients are not cleared.
void adagrad_step(std::span<Tensor* const> params, OptimizerState& state);

}  // namespace mtunet
