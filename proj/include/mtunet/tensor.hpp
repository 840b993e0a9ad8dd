#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mtunet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major f64 array with an optional same-shape gradient buffer.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool is_scalar() const noexcept { return data_.size() == 1; }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double item() const;

  /// Element access for rank-2 and rank-3 tensors.
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t c, std::size_t i, std::size_t j) const {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }
  double& at(std::size_t c, std::size_t i, std::size_t j) {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool on);

  bool has_grad() const noexcept { return !grad_.empty(); }
  std::span<const double> grad() const noexcept { return grad_; }
  /// Allocates a zeroed gradient buffer on first use.
  std::span<double> grad_mut();
  void zero_grad();

  /// Returns a tensor sharing nothing with this one, with the new shape.
  Tensor reshaped(Shape shape) const;

  /// Throws NumericError naming `context` if any value is NaN or infinite.
  void check_finite(std::string_view context) const;

 private:
  Shape shape_;
  std::vector<double> data_;
  std::vector<double> grad_;
  bool requires_grad_ = false;
};

bool all_finite(std::span<const double> values) noexcept;

}  // namespace mtunet
