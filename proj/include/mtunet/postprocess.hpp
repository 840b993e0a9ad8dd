#pragma once

#include <cstddef>
#include <vector>

#include <json.hpp>

#include "mtunet/raster.hpp"

namespace mtunet {

struct PixelCoord {
  std::size_t row = 0;
  std::size_t col = 0;
  auto operator<=>(const PixelCoord&) const = default;
};

/// Inclusive pixel bounds.
struct BoundingBox {
  std::size_t row0 = 0, col0 = 0, row1 = 0, col1 = 0;
  bool operator==(const BoundingBox&) const = default;
};

/// One maximal eight-connected set of foreground pixels.
struct TargetRegion {
  std::vector<PixelCoord> pixels;  // row-major order
  double centroid_row = 0.0;
  double centroid_col = 0.0;
  BoundingBox bbox;

  std::size_t area() const noexcept { return pixels.size(); }
};

/// Foreground iff p > tau.
BinaryMask threshold(const Raster<double>& probability, double tau);

/// max(0.7 * max(P), 0.5 * sigma(P) + mean(P)), population sigma.
double adaptive_threshold(const Raster<double>& probability);

/// Eight-connected components by two-pass labelling with union-find.
/// Regions come out ordered by their first pixel in row-major order.
std::vector<TargetRegion> cluster8(const BinaryMask& mask);

/// Per-pixel component labels (0 = background, 1.. in region order).
Raster<std::uint32_t> label8(const BinaryMask& mask);

nlohmann::json regions_to_json(const std::vector<TargetRegion>& regions);

}  // namespace mtunet
