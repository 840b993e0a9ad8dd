#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mtunet/error.hpp"

namespace mtunet {

/// Row-major single-channel image.
template <typename T>
struct Raster {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<T> data;

  Raster() = default;
  Raster(std::size_t h, std::size_t w, T fill = T{}) : height(h), width(w), data(h * w, fill) {}

  std::size_t size() const noexcept { return data.size(); }
  bool empty() const noexcept { return data.empty(); }
  T& at(std::size_t r, std::size_t c) { return data[r * width + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data[r * width + c]; }

  template <typename U>
  bool same_size(const Raster<U>& other) const noexcept {
    return height == other.height && width == other.width;
  }

  bool operator==(const Raster&) const = default;
};

/// Foreground = 1, background = 0.
using BinaryMask = Raster<std::uint8_t>;

template <typename T, typename U>
void require_same_size(const Raster<T>& a, const Raster<U>& b, const char* what) {
  if (!a.same_size(b)) {
    throw DataError(std::string(what) + ": size mismatch " + std::to_string(a.height) + "x" +
                    std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" + std::to_string(b.width));
  }
}

/// Per-pixel detection probability with the patch origin in source-image
/// coordinates.
struct ProbabilityMap {
  Raster<double> values;
  std::size_t origin_row = 0;
  std::size_t origin_col = 0;
};

inline std::size_t count_foreground(const BinaryMask& mask) {
  std::size_t n = 0;
  for (auto v : mask.data) n += v != 0;
  return n;
}

}  // namespace mtunet
