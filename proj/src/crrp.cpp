#include <cmath>
#include <numbers>
#include <random>

#include "mtunet/datapipe.hpp"

namespace mtunet {

void CrrpConfig::validate() const {
  if (!(scale_min > 0.0) || !(scale_max >= scale_min)) throw ConfigError("crrp: scale range must be positive");
  if (angles.empty()) throw ConfigError("crrp: angle set is empty");
  if (max_retries == 0) throw ConfigError("crrp: max_retries must be positive");
}

nlohmann::json PasteRecord::to_json() const {
  nlohmann::json j{{"scene_id", scene_id},
                   {"source_region", source_region},
                   {"angle", angle},
                   {"scale", scale},
                   {"destination", {dest_row, dest_col}},
                   {"size", {height, width}},
                   {"pasted_pixels", pasted_pixels},
                   {"success", success}};
  if (!warning.empty()) j["warning"] = warning;
  return j;
}

namespace {

struct Patch {
  Raster<double> image;
  BinaryMask mask;
};

Patch extract_window(const Scene& scene, const BoundingBox& box, std::size_t margin) {
  const std::size_t r0 = box.row0 >= margin ? box.row0 - margin : 0;
  const std::size_t c0 = box.col0 >= margin ? box.col0 - margin : 0;
  const std::size_t r1 = std::min(scene.image.height - 1, box.row1 + margin);
  const std::size_t c1 = std::min(scene.image.width - 1, box.col1 + margin);
  Patch p{Raster<double>(r1 - r0 + 1, c1 - c0 + 1), BinaryMask(r1 - r0 + 1, c1 - c0 + 1)};
  for (std::size_t r = r0; r <= r1; ++r) {
    for (std::size_t c = c0; c <= c1; ++c) {
      p.image.at(r - r0, c - c0) = scene.image.at(r, c);
      p.mask.at(r - r0, c - c0) = scene.mask.at(r, c);
    }
  }
  return p;
}

double border_mean(const Raster<double>& img) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t r = 0; r < img.height; ++r) {
    for (std::size_t c = 0; c < img.width; ++c) {
      if (r == 0 || c == 0 || r + 1 == img.height || c + 1 == img.width) {
        total += img.at(r, c);
        ++n;
      }
    }
  }
  return total / static_cast<double>(n);
}

// Rotation about the window centre for angles that are not quarter turns;
// the output grows to hold the rotated window and uncovered image pixels
// take the window's border mean.
Patch rotate_arbitrary(const Patch& in, double degrees) {
  const double a = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(a), sn = std::sin(a);
  const double h = static_cast<double>(in.image.height), w = static_cast<double>(in.image.width);
  const auto oh = static_cast<std::size_t>(std::ceil(std::abs(h * cs) + std::abs(w * sn) - 1e-9));
  const auto ow = static_cast<std::size_t>(std::ceil(std::abs(w * cs) + std::abs(h * sn) - 1e-9));
  Patch out{Raster<double>(oh, ow, border_mean(in.image)), BinaryMask(oh, ow, 0)};
  const double icy = 0.5 * (h - 1), icx = 0.5 * (w - 1);
  const double ocy = 0.5 * (static_cast<double>(oh) - 1), ocx = 0.5 * (static_cast<double>(ow) - 1);
  for (std::size_t r = 0; r < oh; ++r) {
    for (std::size_t c = 0; c < ow; ++c) {
      const double dy = static_cast<double>(r) - ocy, dx = static_cast<double>(c) - ocx;
      // inverse rotation back into the source window
      const double sy = cs * dy - sn * dx + icy;
      const double sx = sn * dy + cs * dx + icx;
      if (sy < -0.5 || sx < -0.5 || sy > h - 0.5 || sx > w - 0.5) continue;
      const auto ny = static_cast<std::size_t>(std::clamp(std::round(sy), 0.0, h - 1));
      const auto nx = static_cast<std::size_t>(std::clamp(std::round(sx), 0.0, w - 1));
      out.mask.at(r, c) = in.mask.at(ny, nx);
      const double fy = std::clamp(sy, 0.0, h - 1), fx = std::clamp(sx, 0.0, w - 1);
      const auto y0 = static_cast<std::size_t>(fy), x0 = static_cast<std::size_t>(fx);
      const std::size_t y1 = std::min(y0 + 1, in.image.height - 1), x1 = std::min(x0 + 1, in.image.width - 1);
      const double wy = fy - static_cast<double>(y0), wx = fx - static_cast<double>(x0);
      out.image.at(r, c) = (1 - wy) * ((1 - wx) * in.image.at(y0, x0) + wx * in.image.at(y0, x1)) +
                           wy * ((1 - wx) * in.image.at(y1, x0) + wx * in.image.at(y1, x1));
    }
  }
  return out;
}

Patch rotate(const Patch& in, int degrees) {
  const int normalized = ((degrees % 360) + 360) % 360;
  if (normalized % 90 == 0) return {rotate90(in.image, normalized / 90), rotate90(in.mask, normalized / 90)};
  return rotate_arbitrary(in, normalized);
}

bool intersects(const BoundingBox& a, const BoundingBox& b) {
  return a.row0 <= b.row1 && b.row0 <= a.row1 && a.col0 <= b.col1 && b.col0 <= a.col1;
}

BoundingBox dilate(const BoundingBox& b, std::size_t by) {
  return {b.row0 >= by ? b.row0 - by : 0, b.col0 >= by ? b.col0 - by : 0, b.row1 + by, b.col1 + by};
}

}  // namespace

CrrpResult crrp(const Scene& scene, const std::vector<TargetRegion>& regions, const CrrpConfig& config,
                std::uint64_t seed) {
  config.validate();
  scene.validate();
  if (regions.empty()) throw DataError("crrp: scene '" + scene.id + "' has no target regions");

  CrrpResult result{scene, {}};
  Scene& out = result.scene;
  std::vector<TargetRegion> current = regions;
  std::mt19937_64 rng(seed);
  const double max_value = scene.bit_depth == 8 ? 255.0 : 65535.0;

  for (std::size_t paste = 0; paste < config.paste_count; ++paste) {
    PasteRecord rec;
    rec.scene_id = scene.id;
    for (std::size_t attempt = 0; attempt < config.max_retries && !rec.success; ++attempt) {
      rec.source_region = std::uniform_int_distribution<std::size_t>(0, regions.size() - 1)(rng);
      rec.angle = config.angles[std::uniform_int_distribution<std::size_t>(0, config.angles.size() - 1)(rng)];
      rec.scale = std::uniform_real_distribution<double>(config.scale_min, config.scale_max)(rng);
      if (config.scale_min == config.scale_max) rec.scale = config.scale_min;

      // Copy from the input scene so pastes never chain off earlier pastes.
      Patch patch = rotate(extract_window(scene, regions[rec.source_region].bbox, config.margin), rec.angle);
      const auto h = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(patch.image.height * rec.scale)));
      const auto w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(patch.image.width * rec.scale)));
      if (h != patch.image.height || w != patch.image.width) {
        patch.image = resize_bilinear(patch.image, h, w);
        patch.mask = resize_nearest(patch.mask, h, w);
      }
      const std::size_t fg = count_foreground(patch.mask);
      if (fg == 0 || h > out.image.height || w > out.image.width) continue;

      const std::size_t row = std::uniform_int_distribution<std::size_t>(0, out.image.height - h)(rng);
      const std::size_t col = std::uniform_int_distribution<std::size_t>(0, out.image.width - w)(rng);
      const BoundingBox dest{row, col, row + h - 1, col + w - 1};
      bool clear = true;
      for (const auto& r : current) {
        if (intersects(dest, dilate(r.bbox, config.min_separation))) {
          clear = false;
          break;
        }
      }
      if (!clear) continue;

      for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
          out.image.at(row + r, col + c) =
              static_cast<std::uint16_t>(std::clamp(std::round(patch.image.at(r, c)), 0.0, max_value));
          out.mask.at(row + r, col + c) = patch.mask.at(r, c);
        }
      }
      rec.dest_row = row;
      rec.dest_col = col;
      rec.height = h;
      rec.width = w;
      rec.pasted_pixels = fg;
      rec.success = true;
    }
    if (rec.success) {
      current = cluster8(out.mask);
    } else {
      rec.warning = "no feasible background placement after " + std::to_string(config.max_retries) + " retries";
    }
    result.log.push_back(std::move(rec));
  }
  return result;
}

}  // namespace mtunet
