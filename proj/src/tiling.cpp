#include <cmath>

#include "mtunet/datapipe.hpp"

namespace mtunet {

void Scene::validate() const {
  if (!image.same_size(mask)) throw DataError("scene '" + id + "': image and mask sizes differ");
  if (bit_depth != 8 && bit_depth != 16) throw DataError("scene '" + id + "': bit depth must be 8 or 16");
}

std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view id) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char ch : id) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::uint64_t z = global_seed ^ (h + 0x9e3779b97f4a7c15ULL + (global_seed << 6) + (global_seed >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

std::vector<double> gaussian_kernel(double sigma) {
  const auto radius = static_cast<std::size_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (std::size_t i = 0; i < k.size(); ++i) {
    const double x = static_cast<double>(i) - static_cast<double>(radius);
    total += k[i] = std::exp(-0.5 * x * x / (sigma * sigma));
  }
  for (double& v : k) v /= total;
  return k;
}

}  // namespace

Raster<double> gaussian_blur(const Raster<double>& in, double sigma) {
  if (!(sigma > 0.0) || in.empty()) return in;
  const auto k = gaussian_kernel(sigma);
  const auto radius = static_cast<std::ptrdiff_t>(k.size() / 2);
  const auto h = static_cast<std::ptrdiff_t>(in.height), w = static_cast<std::ptrdiff_t>(in.width);
  auto clampi = [](std::ptrdiff_t v, std::ptrdiff_t hi) { return v < 0 ? 0 : (v >= hi ? hi - 1 : v); };
  Raster<double> tmp(in.height, in.width), out(in.height, in.width);
  for (std::ptrdiff_t r = 0; r < h; ++r) {
    for (std::ptrdiff_t c = 0; c < w; ++c) {
      double acc = 0.0;
      for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
        acc += k[static_cast<std::size_t>(i + radius)] * in.data[static_cast<std::size_t>(r * w + clampi(c + i, w))];
      }
      tmp.data[static_cast<std::size_t>(r * w + c)] = acc;
    }
  }
  for (std::ptrdiff_t r = 0; r < h; ++r) {
    for (std::ptrdiff_t c = 0; c < w; ++c) {
      double acc = 0.0;
      for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
        acc += k[static_cast<std::size_t>(i + radius)] * tmp.data[static_cast<std::size_t>(clampi(r + i, h) * w + c)];
      }
      out.data[static_cast<std::size_t>(r * w + c)] = acc;
    }
  }
  return out;
}

Raster<std::uint16_t> gaussian_blur(const Raster<std::uint16_t>& in, double sigma, int bit_depth) {
  Raster<double> as_double(in.height, in.width);
  for (std::size_t i = 0; i < in.size(); ++i) as_double.data[i] = in.data[i];
  const auto blurred = gaussian_blur(as_double, sigma);
  const double max_value = bit_depth == 8 ? 255.0 : 65535.0;
  Raster<std::uint16_t> out(in.height, in.width);
  for (std::size_t i = 0; i < in.size(); ++i) {
    out.data[i] = static_cast<std::uint16_t>(std::clamp(std::round(blurred.data[i]), 0.0, max_value));
  }
  return out;
}

}  // namespace mtunet
