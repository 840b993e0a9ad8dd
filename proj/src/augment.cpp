#include <cmath>
#include <random>

#include "mtunet/datapipe.hpp"

namespace mtunet {

Scene classic_augment(const Scene& scene, const AugmentConfig& config, std::uint64_t seed) {
  scene.validate();
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution flip(config.flip_probability);
  Scene out = scene;
  if (flip(rng)) {
    out.image = flip_horizontal(out.image);
    out.mask = flip_horizontal(out.mask);
  }
  if (flip(rng)) {
    out.image = flip_vertical(out.image);
    out.mask = flip_vertical(out.mask);
  }
  if (config.blur_sigma > 0.0) out.image = gaussian_blur(out.image, config.blur_sigma, out.bit_depth);
  return out;
}

Raster<double> resize_bilinear(const Raster<double>& in, std::size_t height, std::size_t width) {
  if (in.empty() || height == 0 || width == 0) throw DataError("resize_bilinear: empty raster");
  Raster<double> out(height, width);
  const double sy = static_cast<double>(in.height) / static_cast<double>(height);
  const double sx = static_cast<double>(in.width) / static_cast<double>(width);
  for (std::size_t r = 0; r < height; ++r) {
    const double fy = std::clamp((static_cast<double>(r) + 0.5) * sy - 0.5, 0.0, static_cast<double>(in.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, in.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t c = 0; c < width; ++c) {
      const double fx = std::clamp((static_cast<double>(c) + 0.5) * sx - 0.5, 0.0, static_cast<double>(in.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, in.width - 1);
      const double wx = fx - static_cast<double>(x0);
      out.at(r, c) = (1 - wy) * ((1 - wx) * in.at(y0, x0) + wx * in.at(y0, x1)) +
                     wy * ((1 - wx) * in.at(y1, x0) + wx * in.at(y1, x1));
    }
  }
  return out;
}

BinaryMask resize_nearest(const BinaryMask& in, std::size_t height, std::size_t width) {
  if (in.empty() || height == 0 || width == 0) throw DataError("resize_nearest: empty raster");
  BinaryMask out(height, width);
  for (std::size_t r = 0; r < height; ++r) {
    const auto sr = std::min(in.height - 1, r * in.height / height);
    for (std::size_t c = 0; c < width; ++c) {
      const auto sc = std::min(in.width - 1, c * in.width / width);
      out.at(r, c) = in.at(sr, sc);
    }
  }
  return out;
}

}  // namespace mtunet
