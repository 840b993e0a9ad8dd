#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mtunet/error.hpp"
#include "mtunet/postprocess.hpp"
#include "mtunet/raster.hpp"

namespace mtunet {

/// Grayscale image with its exact binary target mask.
struct Scene {
  std::string id;
  Raster<std::uint16_t> image;
  int bit_depth = 16;  // 8 or 16
  BinaryMask mask;

  void validate() const;
};

/// Per-scene seed from a global seed and the scene id, so serial and
/// parallel runs draw identical streams.
std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view id);

// ---------------------------------------------------------------------------
// Tiling

template <typename T>
struct Tile {
  std::size_t row = 0;  // origin in the source raster
  std::size_t col = 0;
  std::size_t pad_bottom = 0;
  std::size_t pad_right = 0;
  Raster<T> raster;  // always tile_size x tile_size
};

template <typename T>
struct TileSet {
  std::size_t source_height = 0;
  std::size_t source_width = 0;
  std::size_t tile_size = 0;
  std::vector<Tile<T>> tiles;  // row-major grid order
};

inline constexpr std::size_t kMinTileSize = 32;

/// Non-overlapping grid; right/bottom edge tiles are zero-padded and the
/// padding is recorded.
template <typename T>
TileSet<T> tile(const Raster<T>& source, std::size_t tile_size) {
  if (tile_size < kMinTileSize) throw ConfigError("tile size must be >= 32");
  TileSet<T> set;
  set.source_height = source.height;
  set.source_width = source.width;
  set.tile_size = tile_size;
  for (std::size_t r0 = 0; r0 < source.height; r0 += tile_size) {
    for (std::size_t c0 = 0; c0 < source.width; c0 += tile_size) {
      Tile<T> t;
      t.row = r0;
      t.col = c0;
      const std::size_t h = std::min(tile_size, source.height - r0);
      const std::size_t w = std::min(tile_size, source.width - c0);
      t.pad_bottom = tile_size - h;
      t.pad_right = tile_size - w;
      t.raster = Raster<T>(tile_size, tile_size, T{});
      for (std::size_t r = 0; r < h; ++r) {
        std::copy_n(source.data.begin() + static_cast<std::ptrdiff_t>((r0 + r) * source.width + c0), w,
                    t.raster.data.begin() + static_cast<std::ptrdiff_t>(r * tile_size));
      }
      set.tiles.push_back(std::move(t));
    }
  }
  return set;
}

/// Reassembles the source, dropping padding.
template <typename T>
Raster<T> stitch(const TileSet<T>& set) {
  Raster<T> out(set.source_height, set.source_width, T{});
  for (const auto& t : set.tiles) {
    if (t.raster.height != set.tile_size || t.raster.width != set.tile_size) {
      throw DataError("stitch: tile raster does not match tile size");
    }
    const std::size_t h = set.tile_size - t.pad_bottom;
    const std::size_t w = set.tile_size - t.pad_right;
    if (t.row + h > out.height || t.col + w > out.width) throw DataError("stitch: tile outside source bounds");
    for (std::size_t r = 0; r < h; ++r) {
      std::copy_n(t.raster.data.begin() + static_cast<std::ptrdiff_t>(r * set.tile_size), w,
                  out.data.begin() + static_cast<std::ptrdiff_t>((t.row + r) * out.width + t.col));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalisation and classic augmentation

/// Linear map of [min, max] onto [0, 1]; constant rasters map to 0.
template <typename T>
Raster<double> normalize(const Raster<T>& image) {
  Raster<double> out(image.height, image.width, 0.0);
  if (image.empty()) return out;
  const auto [lo, hi] = std::minmax_element(image.data.begin(), image.data.end());
  const double min = static_cast<double>(*lo), range = static_cast<double>(*hi) - min;
  if (range <= 0.0) return out;
  for (std::size_t i = 0; i < image.size(); ++i) out.data[i] = (static_cast<double>(image.data[i]) - min) / range;
  return out;
}

template <typename T>
Raster<T> flip_horizontal(const Raster<T>& in) {
  Raster<T> out(in.height, in.width);
  for (std::size_t r = 0; r < in.height; ++r)
    for (std::size_t c = 0; c < in.width; ++c) out.at(r, in.width - 1 - c) = in.at(r, c);
  return out;
}

template <typename T>
Raster<T> flip_vertical(const Raster<T>& in) {
  Raster<T> out(in.height, in.width);
  for (std::size_t r = 0; r < in.height; ++r)
    for (std::size_t c = 0; c < in.width; ++c) out.at(in.height - 1 - r, c) = in.at(r, c);
  return out;
}

/// Separable Gaussian blur, radius ceil(3 sigma), clamp-to-edge borders.
Raster<double> gaussian_blur(const Raster<double>& in, double sigma);
/// Integer variant: rounds to nearest and clamps to the bit depth.
Raster<std::uint16_t> gaussian_blur(const Raster<std::uint16_t>& in, double sigma, int bit_depth);

struct AugmentConfig {
  double flip_probability = 0.5;  // independently for each axis
  double blur_sigma = 0.5;        // 0 disables blurring
};

/// Random flips applied jointly to image and mask, then blur on the image.
Scene classic_augment(const Scene& scene, const AugmentConfig& config, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Copy-rotate-resize-paste

struct CrrpConfig {
  std::size_t paste_count = 1;
  double scale_min = 0.8;
  double scale_max = 1.25;
  std::vector<int> angles{0, 90, 180, 270};  // degrees; non-multiples of 90 resample
  std::size_t margin = 4;                    // neighbourhood copied around the target box
  std::size_t min_separation = 2;            // from every existing target box
  std::size_t max_retries = 50;

  void validate() const;
};

struct PasteRecord {
  std::string scene_id;
  std::size_t source_region = 0;
  int angle = 0;
  double scale = 1.0;
  std::size_t dest_row = 0;  // top-left of the pasted window
  std::size_t dest_col = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t pasted_pixels = 0;  // foreground pixels written
  bool success = false;
  std::string warning;

  nlohmann::json to_json() const;
};

struct CrrpResult {
  Scene scene;
  std::vector<PasteRecord> log;  // one record per attempted paste
};

/// Copies a random target with its neighbourhood window, rotates it,
/// rescales it (bilinear image, nearest-neighbour mask) and pastes it onto
/// background at least `min_separation` pixels from every target box. A
/// paste that finds no placement within `max_retries` leaves the scene
/// untouched and logs a warning. Throws DataError if `regions` is empty.
CrrpResult crrp(const Scene& scene, const std::vector<TargetRegion>& regions, const CrrpConfig& config,
                std::uint64_t seed);

/// Window extraction helpers, exposed for testing.
template <typename T>
Raster<T> rotate90(const Raster<T>& in, int quarter_turns) {
  const int q = ((quarter_turns % 4) + 4) % 4;
  if (q == 0) return in;
  const bool swap = q % 2 == 1;
  Raster<T> out(swap ? in.width : in.height, swap ? in.height : in.width);
  for (std::size_t r = 0; r < in.height; ++r) {
    for (std::size_t c = 0; c < in.width; ++c) {
      switch (q) {
        case 1: out.at(in.width - 1 - c, r) = in.at(r, c); break;  // counter-clockwise
        case 2: out.at(in.height - 1 - r, in.width - 1 - c) = in.at(r, c); break;
        default: out.at(c, in.height - 1 - r) = in.at(r, c); break;
      }
    }
  }
  return out;
}

Raster<double> resize_bilinear(const Raster<double>& in, std::size_t height, std::size_t width);
BinaryMask resize_nearest(const BinaryMask& in, std::size_t height, std::size_t width);

// ---------------------------------------------------------------------------
// Synthetic scenes

struct TargetSpec {
  std::size_t min_count = 1;
  std::size_t max_count = 4;
  double min_sigma = 0.6;  // Gaussian width along the minor axis
  double max_sigma = 3.0;
  double max_elongation = 2.0;  // major/minor sigma ratio
  double min_snr = 6.0;         // peak amplitude / noise sigma
  double max_snr = 12.0;
  double mask_level = 0.5;  // mask = blob above this fraction of its peak
  std::size_t min_separation = 4;
  std::size_t border = 2;
};

struct NoiseSpec {
  double background = 2000.0;
  double noise_sigma = 100.0;
  double clutter_amplitude = 300.0;
  double clutter_scale = 12.0;
  std::size_t clutter_bumps = 6;
};

/// Noise plus low-frequency clutter with Gaussian-blob targets and exact
/// masks. 16-bit output, deterministic under `seed`.
std::vector<Scene> synth_scenes(std::size_t count, std::size_t size, const TargetSpec& targets,
                                const NoiseSpec& noise, std::uint64_t seed);
Scene synth_scene(const std::string& id, std::size_t size, const TargetSpec& targets, const NoiseSpec& noise,
                  std::uint64_t seed);

/// A scene plus its noise-free target response: each blob's value relative
/// to its own peak, on mask pixels only (0 elsewhere). Superlevel sets of
/// this map are nested ellipses, one per target.
struct SyntheticScene {
  Scene scene;
  Raster<double> intensity;
};

SyntheticScene synth_labelled_scene(const std::string& id, std::size_t size, const TargetSpec& targets,
                                    const NoiseSpec& noise, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Manifest

struct ManifestEntry {
  std::string id;
  std::filesystem::path image_path;
  std::filesystem::path mask_path;
  std::string split = "train";
};

/// JSON list of {id, image_path, mask_path, split}; paths relative to the
/// manifest's directory are resolved against it on read.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

/// Writes image/<id>.png and mask/<id>.png under `dir` and returns the entry
/// with paths relative to `dir`.
ManifestEntry write_scene(const std::filesystem::path& dir, const Scene& scene, const std::string& split);
Scene load_scene(const ManifestEntry& entry);

}  // namespace mtunet
