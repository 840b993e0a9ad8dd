#include "mtunet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "mtunet/error.hpp"

namespace mtunet {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

bool all_finite(std::span<const double> values) noexcept {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw DataError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                    shape_to_string(shape_));
  }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, std::vector<double>{value}); }

double Tensor::item() const {
  if (data_.size() != 1) throw DataError("item() on non-scalar tensor " + shape_to_string(shape_));
  return data_[0];
}

void Tensor::set_requires_grad(bool on) {
  requires_grad_ = on;
  if (!on) grad_.clear();
}

std::span<double> Tensor::grad_mut() {
  if (grad_.empty()) grad_.assign(data_.size(), 0.0);
  return grad_;
}

void Tensor::zero_grad() { std::fill(grad_.begin(), grad_.end(), 0.0); }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw DataError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::check_finite(std::string_view context) const {
  if (!all_finite(data_)) throw NumericError("non-finite value in " + std::string(context));
}

}  // namespace mtunet
