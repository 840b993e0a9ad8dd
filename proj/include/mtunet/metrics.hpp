#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include <json.hpp>

#include "mtunet/postprocess.hpp"
#include "mtunet/raster.hpp"

namespace mtunet {

inline constexpr double kDefaultCentroidThreshold = 3.0;

struct MatchedPair {
  std::size_t gt = 0;
  std::size_t pred = 0;
  double distance = 0.0;
};

struct MatchResult {
  std::vector<MatchedPair> pairs;
  std::vector<std::size_t> unmatched_gt;
  std::vector<std::size_t> unmatched_pred;
};

/// Greedy one-to-one matching by ascending Euclidean centroid distance;
/// pairs farther apart than `d_thresh` are never matched.
MatchResult match_centroids(const std::vector<TargetRegion>& gt, const std::vector<TargetRegion>& pred,
                            double d_thresh = kDefaultCentroidThreshold);

/// Integer tallies behind Pd, Fa and IoU; additive across images.
struct DetectionCounts {
  std::uint64_t t_correct = 0;
  std::uint64_t t_all = 0;
  std::uint64_t p_false = 0;
  std::uint64_t p_all = 0;
  std::uint64_t target_inter = 0;
  std::uint64_t target_union = 0;

  DetectionCounts& operator+=(const DetectionCounts& o);
  bool operator==(const DetectionCounts&) const = default;
};

struct DetectionReport {
  DetectionCounts counts;
  double pd = 0.0;
  double fa = 0.0;
  double iou = 0.0;
  double d_thresh = kDefaultCentroidThreshold;

  nlohmann::json to_json() const;
};

/// P_false counts pixels of predicted regions left unmatched; pixels of
/// matched regions outside the ground truth only affect IoU.
DetectionCounts count_detections(const BinaryMask& gt_mask, const BinaryMask& pred_mask,
                                 const std::vector<TargetRegion>& gt_regions,
                                 const std::vector<TargetRegion>& pred_regions, const MatchResult& matches);

/// Clusters both masks, matches centroids and tallies.
DetectionCounts count_detections(const BinaryMask& gt_mask, const BinaryMask& pred_mask,
                                 double d_thresh = kDefaultCentroidThreshold);

/// Throws DataError when there are no ground-truth targets (Pd undefined).
DetectionReport make_report(const DetectionCounts& counts, double d_thresh = kDefaultCentroidThreshold);

DetectionReport compute_report(const BinaryMask& gt_mask, const BinaryMask& pred_mask,
                               const std::vector<TargetRegion>& gt_regions,
                               const std::vector<TargetRegion>& pred_regions, const MatchResult& matches,
                               double d_thresh = kDefaultCentroidThreshold);

struct RocSample {
  double tau = 0.0;
  double pd = 0.0;
  double fa = 0.0;
};

struct RocCurve {
  std::vector<RocSample> samples;  // strictly increasing tau
};

/// `count` evenly spaced thresholds covering [0, 1].
std::vector<double> default_tau_grid(std::size_t count = 101);

struct ScoredScene {
  const Raster<double>* probability = nullptr;
  const BinaryMask* gt = nullptr;
};

/// Threshold, cluster, match and tally at each tau; counts are pooled over
/// all scenes before forming Pd and Fa.
RocCurve roc_sweep(std::span<const ScoredScene> scenes, std::span<const double> taus,
                   double d_thresh = kDefaultCentroidThreshold);
RocCurve roc_sweep(const Raster<double>& probability, const BinaryMask& gt, std::span<const double> taus,
                   double d_thresh = kDefaultCentroidThreshold);

/// "tau,pd,fa" with 9 significant digits.
void write_roc_csv(std::ostream& out, const RocCurve& curve);
/// Two-column projections: (fa,pd), (tau,pd), (tau,fa).
void write_roc_projection(std::ostream& out, const RocCurve& curve, const char* x, const char* y);

}  // namespace mtunet
