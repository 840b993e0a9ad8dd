#pragma once

// Independent reference implementations used by the unit tests and the
// acceptance runner. Nothing here calls the code under test except to build
// inputs, so agreement is meaningful.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <span>
#include <vector>

#include "mtunet/datapipe.hpp"
#include "mtunet/graph.hpp"
#include "mtunet/metrics.hpp"
#include "mtunet/model.hpp"
#include "mtunet/ops.hpp"
#include "mtunet/postprocess.hpp"

namespace oracle {

using namespace mtunet;

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t(shape);
  for (double& v : t.data()) v = d(rng);
  return t;
}

inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::max(std::sqrt(na), std::sqrt(nb));
  return scale == 0.0 ? std::sqrt(diff) : std::sqrt(diff) / scale;
}

// ---------------------------------------------------------------------------
// Finite differences

using Builder = std::function<Var(Graph&, std::span<const Var>)>;

/// Scalar probe sum(w * f(inputs)) with fixed random weights w, so every
/// output element contributes a distinct upstream gradient.
inline double probe(const Builder& f, const std::vector<Tensor>& inputs, const std::vector<double>& w) {
  Graph g;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.constant(t));
  const Tensor& out = g.value(f(g, vars));
  double s = 0.0;
  for (std::size_t i = 0; i < out.numel(); ++i) s += w[i] * out[i];
  return s;
}

/// Worst relative error over all inputs between the recorded backward pass
/// and central differences of the probe.
inline double gradcheck(const Builder& f, const std::vector<Tensor>& inputs, std::uint64_t seed, double h = 1e-5) {
  std::mt19937_64 rng(seed);
  Graph g;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.variable(t));
  Var out = f(g, vars);
  const std::size_t n = g.value(out).numel();
  std::vector<double> w(n);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  for (double& v : w) v = d(rng);
  Var loss = ops::sum(g, ops::mul(g, out, g.constant(Tensor(g.shape(out), w))));
  g.backward(loss);

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<double> analytic(inputs[i].numel(), 0.0);
    const auto grad = g.grad(vars[i]);
    if (!grad.empty()) std::copy(grad.begin(), grad.end(), analytic.begin());
    std::vector<double> numeric(inputs[i].numel());
    auto perturbed = inputs;
    for (std::size_t j = 0; j < numeric.size(); ++j) {
      const double x0 = inputs[i][j];
      perturbed[i][j] = x0 + h;
      const double up = probe(f, perturbed, w);
      perturbed[i][j] = x0 - h;
      const double down = probe(f, perturbed, w);
      perturbed[i][j] = x0;
      numeric[j] = (up - down) / (2.0 * h);
    }
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

/// Loss used for the end-to-end model check: sum(w * probability).
inline double model_probe(const Model& model, const Tensor& image, const std::vector<double>& w) {
  Graph g;
  ModelGraph mg(g, model);
  const Tensor& p = g.value(mg.forward(g.constant(image)).output.probability);
  double s = 0.0;
  for (std::size_t i = 0; i < p.numel(); ++i) s += w[i] * p[i];
  return s;
}

struct ModelGradcheck {
  double parameter_error = 0.0;
  double input_error = 0.0;
};

inline ModelGradcheck model_gradcheck(Model& model, const Tensor& image, std::uint64_t seed, double h = 1e-5) {
  std::mt19937_64 rng(seed);
  std::vector<double> w(image.numel());
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  for (double& v : w) v = d(rng);

  model.zero_grad();
  Graph g;
  ModelGraph mg(g, model);
  Var x = g.variable(image);
  Var p = mg.forward(x).output.probability;
  g.backward(ops::sum(g, ops::mul(g, p, g.constant(Tensor(g.shape(p), w)))));
  g.accumulate_parameter_grads();

  ModelGradcheck result;
  std::vector<double> analytic, numeric;
  for (auto& named : model.parameters()) {
    Tensor& t = named.tensor;
    const auto grad = t.grad();
    for (std::size_t j = 0; j < t.numel(); ++j) {
      analytic.push_back(grad.empty() ? 0.0 : grad[j]);
      const double x0 = t[j];
      t[j] = x0 + h;
      const double up = model_probe(model, image, w);
      t[j] = x0 - h;
      const double down = model_probe(model, image, w);
      t[j] = x0;
      numeric.push_back((up - down) / (2.0 * h));
    }
  }
  result.parameter_error = relative_error(analytic, numeric);

  std::vector<double> input_numeric(image.numel());
  Tensor perturbed = image;
  for (std::size_t j = 0; j < image.numel(); ++j) {
    perturbed[j] = image[j] + h;
    const double up = model_probe(model, perturbed, w);
    perturbed[j] = image[j] - h;
    const double down = model_probe(model, perturbed, w);
    perturbed[j] = image[j];
    input_numeric[j] = (up - down) / (2.0 * h);
  }
  result.input_error = relative_error(g.grad(x), input_numeric);
  model.zero_grad();
  return result;
}

// ---------------------------------------------------------------------------
// Loss

/// Direct scalar evaluation of the focal term with the same clamp.
inline double focal_pixel(double p, int y, double gamma, double eps) {
  const long double q = std::clamp<long double>(p, eps, 1.0L - eps);
  if (y) return static_cast<double>(-std::pow(1.0L - q, static_cast<long double>(gamma)) * std::log(q));
  return static_cast<double>(-std::pow(q, static_cast<long double>(gamma)) * std::log(1.0L - q));
}

struct ScalarLoss {
  double focal = 0.0;
  double soft_iou = 0.0;
  double focal_iou = 0.0;
};

inline ScalarLoss scalar_loss(std::span<const double> p, std::span<const std::uint8_t> y, double gamma,
                              double smooth, double eps) {
  long double fl = 0.0L, inter = 0.0L, sp = 0.0L, sy = 0.0L;
  for (std::size_t i = 0; i < p.size(); ++i) {
    fl += focal_pixel(p[i], y[i], gamma, eps);
    inter += p[i] * y[i];
    sp += p[i];
    sy += y[i];
  }
  ScalarLoss out;
  out.focal = static_cast<double>(fl / static_cast<long double>(p.size()));
  out.soft_iou = static_cast<double>((smooth + inter) / (smooth + sp + sy - inter));
  out.focal_iou = 2.0 * (1.0 - out.soft_iou) * std::pow(out.focal, (1.0 + out.soft_iou) / 2.0);
  return out;
}

// ---------------------------------------------------------------------------
// Clustering

/// Eight-connected flood fill in raster order. Regions are listed by their
/// first pixel in raster order, pixels sorted.
inline std::vector<std::vector<PixelCoord>> flood_fill(const BinaryMask& mask) {
  std::vector<int> seen(mask.size(), 0);
  std::vector<std::vector<PixelCoord>> regions;
  for (std::size_t r = 0; r < mask.height; ++r) {
    for (std::size_t c = 0; c < mask.width; ++c) {
      if (!mask.at(r, c) || seen[r * mask.width + c]) continue;
      std::vector<PixelCoord> region;
      std::deque<PixelCoord> queue{{r, c}};
      seen[r * mask.width + c] = 1;
      while (!queue.empty()) {
        const auto p = queue.front();
        queue.pop_front();
        region.push_back(p);
        for (int dr = -1; dr <= 1; ++dr) {
          for (int dc = -1; dc <= 1; ++dc) {
            const auto nr = static_cast<long>(p.row) + dr, nc = static_cast<long>(p.col) + dc;
            if (nr < 0 || nc < 0 || nr >= static_cast<long>(mask.height) || nc >= static_cast<long>(mask.width)) {
              continue;
            }
            const std::size_t idx = static_cast<std::size_t>(nr) * mask.width + static_cast<std::size_t>(nc);
            if (mask.data[idx] && !seen[idx]) {
              seen[idx] = 1;
              queue.push_back({static_cast<std::size_t>(nr), static_cast<std::size_t>(nc)});
            }
          }
        }
      }
      std::sort(region.begin(), region.end());
      regions.push_back(std::move(region));
    }
  }
  return regions;
}

/// Four-connected component count, for the N4 vs N8 comparison.
inline std::size_t count4(const BinaryMask& mask) {
  std::vector<int> seen(mask.size(), 0);
  std::size_t count = 0;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (!mask.data[start] || seen[start]) continue;
    ++count;
    std::vector<std::size_t> stack{start};
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const std::size_t r = i / mask.width, c = i % mask.width;
      const std::size_t nb[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
      for (const auto& n : nb) {
        if (n[0] >= mask.height || n[1] >= mask.width) continue;  // wraps for r-1/c-1 at 0
        const std::size_t j = n[0] * mask.width + n[1];
        if (mask.data[j] && !seen[j]) {
          seen[j] = 1;
          stack.push_back(j);
        }
      }
    }
  }
  return count;
}

inline BinaryMask random_mask(std::size_t h, std::size_t w, double density, std::mt19937_64& rng) {
  std::bernoulli_distribution bit(density);
  BinaryMask m(h, w);
  for (auto& v : m.data) v = bit(rng) ? 1 : 0;
  return m;
}

// ---------------------------------------------------------------------------
// Metrics

/// Brute-force tallies: flood fill both masks, match by repeatedly taking
/// the globally closest remaining pair (ties by gt then pred index).
inline DetectionCounts brute_force_counts(const BinaryMask& gt, const BinaryMask& pred, double d_thresh) {
  const auto g = flood_fill(gt), p = flood_fill(pred);
  auto centroid = [](const std::vector<PixelCoord>& px) {
    double r = 0.0, c = 0.0;
    for (const auto& q : px) {
      r += static_cast<double>(q.row);
      c += static_cast<double>(q.col);
    }
    return std::pair{r / static_cast<double>(px.size()), c / static_cast<double>(px.size())};
  };
  std::vector<bool> g_used(g.size(), false), p_used(p.size(), false);
  std::size_t matched = 0;
  for (;;) {
    double best = INFINITY;
    std::size_t bi = 0, bj = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (g_used[i]) continue;
      const auto [gr, gc] = centroid(g[i]);
      for (std::size_t j = 0; j < p.size(); ++j) {
        if (p_used[j]) continue;
        const auto [pr, pc] = centroid(p[j]);
        const double d = std::hypot(gr - pr, gc - pc);
        if (d < best) {
          best = d;
          bi = i;
          bj = j;
        }
      }
    }
    if (!(best <= d_thresh)) break;
    g_used[bi] = p_used[bj] = true;
    ++matched;
  }
  DetectionCounts c;
  c.t_all = g.size();
  c.t_correct = matched;
  c.p_all = gt.size();
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (!p_used[j]) c.p_false += p[j].size();
  }
  for (std::size_t i = 0; i < gt.size(); ++i) {
    c.target_inter += gt.data[i] && pred.data[i];
    c.target_union += gt.data[i] || pred.data[i];
  }
  return c;
}

/// Scored map for ROC checks: each ground-truth target carries its own
/// noise-free response scaled by a random peak, and decoy blobs from a
/// second scene (kept well clear of every target) add false alarms. All
/// superlevel sets are nested, point-symmetric ellipses.
struct RocScene {
  BinaryMask gt;
  Raster<double> score;
};

inline RocScene roc_scene(std::size_t index, std::uint64_t seed) {
  TargetSpec spec;
  spec.min_sigma = 1.0;
  NoiseSpec noise;
  const auto id = "roc_" + std::to_string(index);
  auto target = synth_labelled_scene(id, 64, spec, noise, derive_seed(seed, id));
  auto decoy = synth_labelled_scene(id + "_decoy", 64, spec, noise, derive_seed(seed ^ 0xdecdecULL, id));
  std::mt19937_64 rng(derive_seed(seed, id + "_peaks"));
  std::uniform_real_distribution<double> peak(0.05, 1.0);

  RocScene s;
  s.gt = target.scene.mask;
  s.score = Raster<double>(64, 64, 0.0);
  const auto targets = cluster8(s.gt);
  for (const auto& region : targets) {
    const double a = peak(rng);
    for (const auto& px : region.pixels) s.score.at(px.row, px.col) = a * target.intensity.at(px.row, px.col);
  }
  for (const auto& region : cluster8(decoy.scene.mask)) {
    const double a = peak(rng);
    bool clear = true;
    for (const auto& t : targets) {
      const std::size_t m = 6;
      if (region.bbox.row0 <= t.bbox.row1 + m && t.bbox.row0 <= region.bbox.row1 + m &&
          region.bbox.col0 <= t.bbox.col1 + m && t.bbox.col0 <= region.bbox.col1 + m) {
        clear = false;
      }
    }
    if (!clear) continue;
    for (const auto& px : region.pixels) s.score.at(px.row, px.col) = a * decoy.intensity.at(px.row, px.col);
  }
  return s;
}

}  // namespace oracle
