#include "mtunet/image_io.hpp"

#include <png.h>

#include <bit>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>

#include "mtunet/datapipe.hpp"

namespace mtunet {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// libpng reports through these instead of stderr; the message lands in the
// DataError raised after the longjmp.
void on_png_error(png_structp png, png_const_charp message) {
  if (auto* sink = static_cast<std::string*>(png_get_error_ptr(png))) *sink = message;
  png_longjmp(png, 1);
}

void on_png_warning(png_structp, png_const_charp) {}

std::filesystem::path temp_path(const std::filesystem::path& path) {
  return std::filesystem::path(path).concat(".tmp");
}

}  // namespace

GrayImage read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw DataError("cannot open " + path.string());
  std::string png_message;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &png_message, on_png_error, on_png_warning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("libpng initialisation failed");
  }
  GrayImage out;
  std::vector<png_bytep> rows;
  std::vector<std::uint8_t> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("corrupt PNG " + path.string() + ": " + png_message);
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  const auto width = png_get_image_width(png, info);
  const auto height = png_get_image_height(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (color != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError(path.string() + ": only grayscale PNG is supported");
  }
  if (depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (depth == 16 && std::endian::native == std::endian::little) png_set_swap(png);
  png_read_update_info(png, info);
  const std::size_t row_bytes = png_get_rowbytes(png, info);
  buffer.resize(row_bytes * height);
  rows.resize(height);
  for (std::size_t r = 0; r < height; ++r) rows[r] = buffer.data() + r * row_bytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  out.bit_depth = depth == 16 ? 16 : 8;
  out.pixels = Raster<std::uint16_t>(height, width);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      if (out.bit_depth == 16) {
        std::uint16_t v;
        std::memcpy(&v, rows[r] + 2 * c, 2);
        out.pixels.at(r, c) = v;
      } else {
        out.pixels.at(r, c) = rows[r][c];
      }
    }
  }
  return out;
}

void write_png(const std::filesystem::path& path, const Raster<std::uint16_t>& pixels, int bit_depth) {
  if (bit_depth != 8 && bit_depth != 16) throw DataError("PNG bit depth must be 8 or 16");
  if (pixels.empty()) throw DataError("cannot write empty PNG");
  const auto tmp = temp_path(path);
  {
    FilePtr file(std::fopen(tmp.c_str(), "wb"));
    if (!file) throw DataError("cannot create " + tmp.string());
    std::string png_message;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &png_message, on_png_error, on_png_warning);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
      png_destroy_write_struct(&png, &info);
      throw DataError("libpng initialisation failed");
    }
    const std::size_t bpp = bit_depth / 8;
    std::vector<std::uint8_t> buffer(pixels.size() * bpp);
    for (std::size_t i = 0; i < pixels.size(); ++i) {
      if (bit_depth == 16) {
        std::memcpy(buffer.data() + 2 * i, &pixels.data[i], 2);
      } else {
        if (pixels.data[i] > 255) {
          png_destroy_write_struct(&png, &info);
          throw DataError("8-bit PNG value out of range");
        }
        buffer[i] = static_cast<std::uint8_t>(pixels.data[i]);
      }
    }
    std::vector<png_bytep> rows(pixels.height);
    for (std::size_t r = 0; r < pixels.height; ++r) rows[r] = buffer.data() + r * pixels.width * bpp;
    if (setjmp(png_jmpbuf(png))) {
      png_destroy_write_struct(&png, &info);
      throw DataError("failed writing PNG " + path.string() + ": " + png_message);
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(pixels.width), static_cast<png_uint_32>(pixels.height), bit_depth,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    if (bit_depth == 16 && std::endian::native == std::endian::little) png_set_swap(png);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
  }
  std::filesystem::rename(tmp, path);
}

BinaryMask read_mask_png(const std::filesystem::path& path) {
  const auto img = read_png(path);
  BinaryMask mask(img.pixels.height, img.pixels.width);
  for (std::size_t i = 0; i < mask.size(); ++i) mask.data[i] = img.pixels.data[i] != 0;
  return mask;
}

void write_mask_png(const std::filesystem::path& path, const BinaryMask& mask) {
  Raster<std::uint16_t> pixels(mask.height, mask.width);
  for (std::size_t i = 0; i < mask.size(); ++i) pixels.data[i] = mask.data[i] ? 255 : 0;
  write_png(path, pixels, 8);
}

Raster<double> quantize_probability(const Raster<double>& probability) {
  Raster<double> out(probability.height, probability.width);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.data[i] = std::round(std::clamp(probability.data[i], 0.0, 1.0) * 65535.0) / 65535.0;
  }
  return out;
}

void write_probability_png(const std::filesystem::path& path, const Raster<double>& probability) {
  Raster<std::uint16_t> pixels(probability.height, probability.width);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    pixels.data[i] = static_cast<std::uint16_t>(std::round(std::clamp(probability.data[i], 0.0, 1.0) * 65535.0));
  }
  write_png(path, pixels, 16);
}

Raster<double> read_probability_png(const std::filesystem::path& path) {
  const auto img = read_png(path);
  const double scale = img.bit_depth == 16 ? 65535.0 : 255.0;
  Raster<double> out(img.pixels.height, img.pixels.width);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = img.pixels.data[i] / scale;
  return out;
}

void write_probability_raw(const std::filesystem::path& path, const Raster<double>& probability) {
  const auto tmp = temp_path(path);
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot create " + tmp.string());
    auto put = [&out](std::uint32_t v) {
      const char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
                         static_cast<char>(v >> 24)};
      out.write(b, 4);
    };
    put(static_cast<std::uint32_t>(probability.height));
    put(static_cast<std::uint32_t>(probability.width));
    for (double v : probability.data) put(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  std::filesystem::rename(tmp, path);
}

Raster<double> read_probability_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  auto get = [&in]() {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw DataError("raw probability file truncated");
    return static_cast<std::uint32_t>(b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24));
  };
  const std::size_t h = get(), w = get();
  Raster<double> out(h, w);
  for (double& v : out.data) v = std::bit_cast<float>(get());
  return out;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + path.string() + ": " + e.what());
  }
  if (!j.is_array()) throw DataError("manifest must be a JSON list");
  const auto base = path.parent_path();
  std::vector<ManifestEntry> entries;
  for (const auto& e : j) {
    try {
      ManifestEntry m;
      m.id = e.at("id").get<std::string>();
      m.image_path = base / e.at("image_path").get<std::string>();
      m.mask_path = base / e.at("mask_path").get<std::string>();
      m.split = e.value("split", "train");
      entries.push_back(std::move(m));
    } catch (const nlohmann::json::exception& ex) {
      throw DataError("manifest entry: " + std::string(ex.what()));
    }
  }
  return entries;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : entries) {
    j.push_back({{"id", e.id},
                 {"image_path", e.image_path.generic_string()},
                 {"mask_path", e.mask_path.generic_string()},
                 {"split", e.split}});
  }
  const auto tmp = temp_path(path);
  {
    std::ofstream out(tmp);
    if (!out) throw DataError("cannot create " + tmp.string());
    out << j.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, path);
}

ManifestEntry write_scene(const std::filesystem::path& dir, const Scene& scene, const std::string& split) {
  scene.validate();
  std::filesystem::create_directories(dir / "image");
  std::filesystem::create_directories(dir / "mask");
  ManifestEntry e{scene.id, std::filesystem::path("image") / (scene.id + ".png"),
                  std::filesystem::path("mask") / (scene.id + ".png"), split};
  write_png(dir / e.image_path, scene.image, scene.bit_depth);
  write_mask_png(dir / e.mask_path, scene.mask);
  return e;
}

Scene load_scene(const ManifestEntry& entry) {
  Scene s;
  s.id = entry.id;
  auto img = read_png(entry.image_path);
  s.image = std::move(img.pixels);
  s.bit_depth = img.bit_depth;
  s.mask = read_mask_png(entry.mask_path);
  s.validate();
  return s;
}

}  // namespace mtunet
