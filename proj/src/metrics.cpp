#include "mtunet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <ostream>
#include <tuple>

#include "mtunet/error.hpp"

namespace mtunet {

MatchResult match_centroids(const std::vector<TargetRegion>& gt, const std::vector<TargetRegion>& pred,
                            double d_thresh) {
  if (!(d_thresh > 0.0)) throw ConfigError("match_centroids: d_thresh must be positive");
  std::vector<MatchedPair> candidates;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    for (std::size_t j = 0; j < pred.size(); ++j) {
      const double d = std::hypot(gt[i].centroid_row - pred[j].centroid_row, gt[i].centroid_col - pred[j].centroid_col);
      if (d <= d_thresh) candidates.push_back({i, j, d});
    }
  }
  std::sort(candidates.begin(), candidates.end(), [](const MatchedPair& a, const MatchedPair& b) {
    return std::tie(a.distance, a.gt, a.pred) < std::tie(b.distance, b.gt, b.pred);
  });
  MatchResult result;
  std::vector<bool> gt_used(gt.size(), false), pred_used(pred.size(), false);
  for (const auto& c : candidates) {
    if (gt_used[c.gt] || pred_used[c.pred]) continue;
    gt_used[c.gt] = pred_used[c.pred] = true;
    result.pairs.push_back(c);
  }
  for (std::size_t i = 0; i < gt.size(); ++i)
    if (!gt_used[i]) result.unmatched_gt.push_back(i);
  for (std::size_t j = 0; j < pred.size(); ++j)
    if (!pred_used[j]) result.unmatched_pred.push_back(j);
  return result;
}

DetectionCounts& DetectionCounts::operator+=(const DetectionCounts& o) {
  t_correct += o.t_correct;
  t_all += o.t_all;
  p_false += o.p_false;
  p_all += o.p_all;
  target_inter += o.target_inter;
  target_union += o.target_union;
  return *this;
}

DetectionCounts count_detections(const BinaryMask& gt_mask, const BinaryMask& pred_mask,
                                 const std::vector<TargetRegion>& gt_regions,
                                 const std::vector<TargetRegion>& pred_regions, const MatchResult& matches) {
  require_same_size(gt_mask, pred_mask, "count_detections");
  DetectionCounts c;
  c.t_all = gt_regions.size();
  c.t_correct = matches.pairs.size();
  for (std::size_t j : matches.unmatched_pred) c.p_false += pred_regions.at(j).area();
  c.p_all = gt_mask.size();
  for (std::size_t i = 0; i < gt_mask.size(); ++i) {
    const bool g = gt_mask.data[i] != 0, p = pred_mask.data[i] != 0;
    c.target_inter += g && p;
    c.target_union += g || p;
  }
  return c;
}

DetectionCounts count_detections(const BinaryMask& gt_mask, const BinaryMask& pred_mask, double d_thresh) {
  const auto gt_regions = cluster8(gt_mask);
  const auto pred_regions = cluster8(pred_mask);
  return count_detections(gt_mask, pred_mask, gt_regions, pred_regions,
                          match_centroids(gt_regions, pred_regions, d_thresh));
}

DetectionReport make_report(const DetectionCounts& counts, double d_thresh) {
  if (counts.t_all == 0) throw DataError("detection report: no ground-truth targets, Pd is undefined");
  if (counts.p_all == 0) throw DataError("detection report: empty image");
  DetectionReport r;
  r.counts = counts;
  r.d_thresh = d_thresh;
  r.pd = static_cast<double>(counts.t_correct) / static_cast<double>(counts.t_all);
  r.fa = static_cast<double>(counts.p_false) / static_cast<double>(counts.p_all);
  r.iou = counts.target_union == 0
              ? 1.0
              : static_cast<double>(counts.target_inter) / static_cast<double>(counts.target_union);
  return r;
}

DetectionReport compute_report(const BinaryMask& gt_mask, const BinaryMask& pred_mask,
                               const std::vector<TargetRegion>& gt_regions,
                               const std::vector<TargetRegion>& pred_regions, const MatchResult& matches,
                               double d_thresh) {
  return make_report(count_detections(gt_mask, pred_mask, gt_regions, pred_regions, matches), d_thresh);
}

nlohmann::json DetectionReport::to_json() const {
  return {{"pd", pd},
          {"fa", fa},
          {"iou", iou},
          {"d_thresh", d_thresh},
          {"t_correct", counts.t_correct},
          {"t_all", counts.t_all},
          {"p_false", counts.p_false},
          {"p_all", counts.p_all},
          {"target_inter", counts.target_inter},
          {"target_union", counts.target_union}};
}

std::vector<double> default_tau_grid(std::size_t count) {
  if (count < 2) throw ConfigError("tau grid needs at least two points");
  std::vector<double> taus(count);
  for (std::size_t i = 0; i < count; ++i) taus[i] = static_cast<double>(i) / static_cast<double>(count - 1);
  return taus;
}

RocCurve roc_sweep(std::span<const ScoredScene> scenes, std::span<const double> taus, double d_thresh) {
  for (std::size_t i = 0; i < taus.size(); ++i) {
    if (taus[i] < 0.0 || taus[i] > 1.0) throw ConfigError("roc: tau outside [0,1]");
    if (i > 0 && !(taus[i] > taus[i - 1])) throw ConfigError("roc: taus must be strictly increasing");
  }
  std::vector<std::vector<TargetRegion>> gt_regions;
  for (const auto& s : scenes) {
    require_same_size(*s.probability, *s.gt, "roc_sweep");
    gt_regions.push_back(cluster8(*s.gt));
  }
  RocCurve curve;
  for (double tau : taus) {
    DetectionCounts total;
    for (std::size_t k = 0; k < scenes.size(); ++k) {
      const auto pred_mask = threshold(*scenes[k].probability, tau);
      const auto pred_regions = cluster8(pred_mask);
      const auto matches = match_centroids(gt_regions[k], pred_regions, d_thresh);
      total += count_detections(*scenes[k].gt, pred_mask, gt_regions[k], pred_regions, matches);
    }
    const auto report = make_report(total, d_thresh);
    curve.samples.push_back({tau, report.pd, report.fa});
  }
  return curve;
}

RocCurve roc_sweep(const Raster<double>& probability, const BinaryMask& gt, std::span<const double> taus,
                   double d_thresh) {
  const ScoredScene scene{&probability, &gt};
  return roc_sweep(std::span<const ScoredScene>(&scene, 1), taus, d_thresh);
}

namespace {

std::string fmt9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

double column(const RocSample& s, const char* name) {
  if (std::strcmp(name, "tau") == 0) return s.tau;
  if (std::strcmp(name, "pd") == 0) return s.pd;
  if (std::strcmp(name, "fa") == 0) return s.fa;
  throw ConfigError(std::string("unknown ROC column ") + name);
}

}  // namespace

void write_roc_csv(std::ostream& out, const RocCurve& curve) {
  out << "tau,pd,fa\n";
  for (const auto& s : curve.samples) out << fmt9(s.tau) << ',' << fmt9(s.pd) << ',' << fmt9(s.fa) << '\n';
}

void write_roc_projection(std::ostream& out, const RocCurve& curve, const char* x, const char* y) {
  out << x << ',' << y << '\n';
  for (const auto& s : curve.samples) out << fmt9(column(s, x)) << ',' << fmt9(column(s, y)) << '\n';
}

}  // namespace mtunet
