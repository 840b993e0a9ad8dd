#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "mtunet/datapipe.hpp"

namespace mtunet {

namespace {

struct Blob {
  double row, col;
  double sigma_major, sigma_minor, angle;
  double amplitude;

  double value(double r, double c) const {
    const double dy = r - row, dx = c - col;
    const double u = std::cos(angle) * dx + std::sin(angle) * dy;
    const double v = -std::sin(angle) * dx + std::cos(angle) * dy;
    return amplitude * std::exp(-0.5 * (u * u / (sigma_major * sigma_major) + v * v / (sigma_minor * sigma_minor)));
  }

  // Pixels within this radius hold all mass above 1e-4 of the peak.
  double support() const { return std::ceil(4.3 * sigma_major); }
};

void validate(const TargetSpec& t, const NoiseSpec& n) {
  if (t.min_count > t.max_count) throw ConfigError("synth: min_count > max_count");
  if (!(t.min_sigma > 0.0) || t.max_sigma < t.min_sigma) throw ConfigError("synth: invalid sigma range");
  if (t.max_elongation < 1.0) throw ConfigError("synth: elongation must be >= 1");
  if (t.min_snr < 0.0 || t.max_snr < t.min_snr) throw ConfigError("synth: invalid SNR range");
  if (!(t.mask_level > 0.0 && t.mask_level < 1.0)) throw ConfigError("synth: mask_level must be in (0,1)");
  if (n.noise_sigma < 0.0) throw ConfigError("synth: noise sigma must be >= 0");
}

std::vector<Blob> place_targets(std::size_t size, const TargetSpec& spec, double noise_sigma, std::mt19937_64& rng,
                                std::vector<BoundingBox>& boxes) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t count = std::uniform_int_distribution<std::size_t>(spec.min_count, spec.max_count)(rng);
  std::vector<Blob> blobs;
  for (std::size_t t = 0; t < count; ++t) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      Blob b{};
      b.sigma_minor = spec.min_sigma + (spec.max_sigma - spec.min_sigma) * unit(rng);
      b.sigma_major = b.sigma_minor * (1.0 + (spec.max_elongation - 1.0) * unit(rng));
      b.angle = std::numbers::pi * unit(rng);
      b.amplitude = (spec.min_snr + (spec.max_snr - spec.min_snr) * unit(rng)) * std::max(noise_sigma, 1.0);
      // The mask extent along the major axis is sigma_major * sqrt(2 ln(1/level)).
      const double reach = std::ceil(b.sigma_major * std::sqrt(2.0 * std::log(1.0 / spec.mask_level))) +
                           static_cast<double>(spec.border);
      if (2.0 * reach + 1.0 >= static_cast<double>(size)) continue;
      const auto lo = static_cast<std::size_t>(reach);
      const std::size_t hi = size - 1 - lo;
      b.row = static_cast<double>(std::uniform_int_distribution<std::size_t>(lo, hi)(rng));
      b.col = static_cast<double>(std::uniform_int_distribution<std::size_t>(lo, hi)(rng));
      const auto r = static_cast<std::size_t>(reach) - spec.border;
      const BoundingBox box{static_cast<std::size_t>(b.row) - r, static_cast<std::size_t>(b.col) - r,
                            static_cast<std::size_t>(b.row) + r, static_cast<std::size_t>(b.col) + r};
      bool clear = true;
      for (const auto& other : boxes) {
        const std::size_t s = spec.min_separation;
        if (box.row0 <= other.row1 + s && other.row0 <= box.row1 + s && box.col0 <= other.col1 + s &&
            other.col0 <= box.col1 + s) {
          clear = false;
          break;
        }
      }
      if (!clear) continue;
      boxes.push_back(box);
      blobs.push_back(b);
      break;
    }
  }
  return blobs;
}

}  // namespace

SyntheticScene synth_labelled_scene(const std::string& id, std::size_t size, const TargetSpec& targets,
                                    const NoiseSpec& noise, std::uint64_t seed) {
  if (size < kMinTileSize) throw ConfigError("synth: scene size must be >= 32");
  validate(targets, noise);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  Raster<double> signal(size, size, noise.background);
  for (std::size_t k = 0; k < noise.clutter_bumps; ++k) {
    const double cr = unit(rng) * static_cast<double>(size), cc = unit(rng) * static_cast<double>(size);
    const double amp = noise.clutter_amplitude * (2.0 * unit(rng) - 1.0);
    const double s = noise.clutter_scale * (0.5 + unit(rng));
    for (std::size_t r = 0; r < size; ++r) {
      for (std::size_t c = 0; c < size; ++c) {
        const double dy = static_cast<double>(r) - cr, dx = static_cast<double>(c) - cc;
        signal.at(r, c) += amp * std::exp(-0.5 * (dy * dy + dx * dx) / (s * s));
      }
    }
  }

  std::vector<BoundingBox> boxes;
  const auto blobs = place_targets(size, targets, noise.noise_sigma, rng, boxes);
  SyntheticScene out;
  Scene& scene = out.scene;
  out.intensity = Raster<double>(size, size, 0.0);
  scene.id = id;
  scene.bit_depth = 16;
  scene.mask = BinaryMask(size, size, 0);
  for (const auto& b : blobs) {
    const auto reach = static_cast<std::ptrdiff_t>(b.support());
    const auto br = static_cast<std::ptrdiff_t>(b.row), bc = static_cast<std::ptrdiff_t>(b.col);
    for (std::ptrdiff_t r = std::max<std::ptrdiff_t>(0, br - reach);
         r <= std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(size) - 1, br + reach); ++r) {
      for (std::ptrdiff_t c = std::max<std::ptrdiff_t>(0, bc - reach);
           c <= std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(size) - 1, bc + reach); ++c) {
        const double v = b.value(static_cast<double>(r), static_cast<double>(c));
        signal.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) += v;
        if (v > targets.mask_level * b.amplitude) {
          const auto ur = static_cast<std::size_t>(r), uc = static_cast<std::size_t>(c);
          scene.mask.at(ur, uc) = 1;
          out.intensity.at(ur, uc) = std::max(out.intensity.at(ur, uc), v / b.amplitude);
        }
      }
    }
  }

  scene.image = Raster<std::uint16_t>(size, size);
  for (std::size_t i = 0; i < signal.size(); ++i) {
    const double v = signal.data[i] + noise.noise_sigma * gauss(rng);
    scene.image.data[i] = static_cast<std::uint16_t>(std::clamp(std::round(v), 0.0, 65535.0));
  }
  return out;
}

Scene synth_scene(const std::string& id, std::size_t size, const TargetSpec& targets, const NoiseSpec& noise,
                  std::uint64_t seed) {
  return synth_labelled_scene(id, size, targets, noise, seed).scene;
}

std::vector<Scene> synth_scenes(std::size_t count, std::size_t size, const TargetSpec& targets,
                                const NoiseSpec& noise, std::uint64_t seed) {
  std::vector<Scene> scenes;
  scenes.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "scene_%04zu", i);
    scenes.push_back(synth_scene(id, size, targets, noise, derive_seed(seed, id)));
  }
  return scenes;
}

}  // namespace mtunet
