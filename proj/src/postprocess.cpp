#include "mtunet/postprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mtunet {

namespace {

class DisjointSets {
 public:
  std::uint32_t make() {
    parent_.push_back(static_cast<std::uint32_t>(parent_.size()));
    return parent_.back();
  }

  std::uint32_t find(std::uint32_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }

  void unite(std::uint32_t a, std::uint32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    // Smaller root wins so each set is named by its earliest label.
    if (a < b) std::swap(a, b);
    parent_[a] = b;
  }

  std::size_t size() const noexcept { return parent_.size(); }

 private:
  std::vector<std::uint32_t> parent_;
};

}  // namespace

BinaryMask threshold(const Raster<double>& probability, double tau) {
  BinaryMask mask(probability.height, probability.width);
  for (std::size_t i = 0; i < probability.size(); ++i) mask.data[i] = probability.data[i] > tau ? 1 : 0;
  return mask;
}

double adaptive_threshold(const Raster<double>& probability) {
  if (probability.empty()) throw DataError("adaptive_threshold: empty map");
  const auto& v = probability.data;
  const double n = static_cast<double>(v.size());
  const double peak = *std::max_element(v.begin(), v.end());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double sigma = std::sqrt(var / n);
  return std::max(0.7 * peak, 0.5 * sigma + mean);
}

Raster<std::uint32_t> label8(const BinaryMask& mask) {
  const std::size_t h = mask.height, w = mask.width;
  Raster<std::uint32_t> labels(h, w, 0);
  DisjointSets sets;
  sets.make();  // label 0 is background

  // First pass: provisional labels from the already-visited half of N8.
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      if (!mask.at(r, c)) continue;
      std::uint32_t neighbours[4];
      std::size_t count = 0;
      if (c > 0 && labels.at(r, c - 1)) neighbours[count++] = labels.at(r, c - 1);
      if (r > 0) {
        if (c > 0 && labels.at(r - 1, c - 1)) neighbours[count++] = labels.at(r - 1, c - 1);
        if (labels.at(r - 1, c)) neighbours[count++] = labels.at(r - 1, c);
        if (c + 1 < w && labels.at(r - 1, c + 1)) neighbours[count++] = labels.at(r - 1, c + 1);
      }
      if (count == 0) {
        labels.at(r, c) = sets.make();
        continue;
      }
      std::uint32_t label = *std::min_element(neighbours, neighbours + count);
      for (std::size_t i = 0; i < count; ++i) sets.unite(label, neighbours[i]);
      labels.at(r, c) = label;
    }
  }

  // Second pass: resolve to roots, renumbered densely in raster order.
  std::vector<std::uint32_t> dense(sets.size(), 0);
  std::uint32_t next = 1;
  for (auto& l : labels.data) {
    if (!l) continue;
    const std::uint32_t root = sets.find(l);
    if (!dense[root]) dense[root] = next++;
    l = dense[root];
  }
  return labels;
}

std::vector<TargetRegion> cluster8(const BinaryMask& mask) {
  const auto labels = label8(mask);
  std::uint32_t count = 0;
  for (auto l : labels.data) count = std::max(count, l);
  std::vector<TargetRegion> regions(count);
  for (std::size_t r = 0; r < mask.height; ++r) {
    for (std::size_t c = 0; c < mask.width; ++c) {
      if (const auto l = labels.at(r, c)) regions[l - 1].pixels.push_back({r, c});
    }
  }
  for (auto& region : regions) {
    double sr = 0.0, sc = 0.0;
    BoundingBox box{region.pixels.front().row, region.pixels.front().col, region.pixels.front().row,
                    region.pixels.front().col};
    for (const auto& p : region.pixels) {
      sr += static_cast<double>(p.row);
      sc += static_cast<double>(p.col);
      box.row0 = std::min(box.row0, p.row);
      box.col0 = std::min(box.col0, p.col);
      box.row1 = std::max(box.row1, p.row);
      box.col1 = std::max(box.col1, p.col);
    }
    const double n = static_cast<double>(region.pixels.size());
    region.centroid_row = sr / n;
    region.centroid_col = sc / n;
    region.bbox = box;
  }
  return regions;
}

nlohmann::json regions_to_json(const std::vector<TargetRegion>& regions) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : regions) {
    out.push_back({{"area", r.area()},
                   {"centroid", {r.centroid_row, r.centroid_col}},
                   {"bbox", {r.bbox.row0, r.bbox.col0, r.bbox.row1, r.bbox.col1}}});
  }
  return out;
}

}  // namespace mtunet
