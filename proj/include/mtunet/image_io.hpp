#pragma once

#include <cstdint>
#include <filesystem>

#include "mtunet/raster.hpp"

namespace mtunet {

struct GrayImage {
  Raster<std::uint16_t> pixels;
  int bit_depth = 8;
};

/// Reads an 8- or 16-bit grayscale PNG (palette/RGB inputs are rejected).
GrayImage read_png(const std::filesystem::path& path);
/// Writes an 8- or 16-bit grayscale PNG via a temporary file and rename.
void write_png(const std::filesystem::path& path, const Raster<std::uint16_t>& pixels, int bit_depth);

/// Masks are stored as 8-bit {0,255}; any non-zero pixel reads back as 1.
BinaryMask read_mask_png(const std::filesystem::path& path);
void write_mask_png(const std::filesystem::path& path, const BinaryMask& mask);

/// Probability maps as 16-bit PNG with value round(p * 65535).
void write_probability_png(const std::filesystem::path& path, const Raster<double>& probability);
Raster<double> read_probability_png(const std::filesystem::path& path);
/// Quantise to the 16-bit grid used on disk.
Raster<double> quantize_probability(const Raster<double>& probability);

/// Exact f32 dump: u32 height, u32 width, then little-endian f32 values.
void write_probability_raw(const std::filesystem::path& path, const Raster<double>& probability);
Raster<double> read_probability_raw(const std::filesystem::path& path);

}  // namespace mtunet
