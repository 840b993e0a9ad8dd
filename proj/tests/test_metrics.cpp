#include <doctest.h>

#include <random>
#include <sstream>

#include "mtunet/metrics.hpp"
#include "oracles.hpp"

using namespace mtunet;

namespace {

TargetRegion point(double r, double c) {
  TargetRegion t;
  t.centroid_row = r;
  t.centroid_col = c;
  t.pixels.push_back({static_cast<std::size_t>(r), static_cast<std::size_t>(c)});
  return t;
}

DetectionReport report(const BinaryMask& gt, const BinaryMask& pred, double d = kDefaultCentroidThreshold) {
  const auto g = cluster8(gt), p = cluster8(pred);
  return compute_report(gt, pred, g, p, match_centroids(g, p, d), d);
}

}  // namespace

TEST_CASE("centroid matching examples") {
  const std::vector<TargetRegion> gt{point(10, 10)};
  const auto near = match_centroids(gt, {point(12, 12)});
  REQUIRE(near.pairs.size() == 1);
  CHECK(near.pairs[0].distance == doctest::Approx(std::sqrt(8.0)));

  CHECK(match_centroids(gt, {point(13, 10)}).pairs.size() == 1);  // exactly 3 is inside
  CHECK(match_centroids(gt, {point(13, 11)}).pairs.empty());

  const auto two = match_centroids(gt, {point(11, 10), point(10, 11.5)});
  REQUIRE(two.pairs.size() == 1);
  CHECK(two.pairs[0].pred == 0);
  CHECK(two.unmatched_pred == std::vector<std::size_t>{1});
  CHECK(two.unmatched_gt.empty());

  const std::vector<TargetRegion> same{point(1, 1), point(5, 5), point(9, 2)};
  const auto all = match_centroids(same, same);
  CHECK(all.pairs.size() == 3);
  for (const auto& p : all.pairs) {
    CHECK(p.gt == p.pred);
    CHECK(p.distance == 0.0);
  }
  CHECK_THROWS_AS(match_centroids(gt, gt, 0.0), ConfigError);
}

TEST_CASE("greedy matching prefers the globally closest pair") {
  // gt1 is 0.5 from pred0, so gt0 has to settle for pred1 at 2.5.
  const std::vector<TargetRegion> gt{point(10, 9), point(10, 10.5)};
  const std::vector<TargetRegion> pred{point(10, 10), point(10, 11.5)};
  const auto m = match_centroids(gt, pred);
  REQUIRE(m.pairs.size() == 2);
  CHECK(m.pairs[0].gt == 1);
  CHECK(m.pairs[0].pred == 0);
  CHECK(m.pairs[1].gt == 0);
  CHECK(m.pairs[1].pred == 1);
}

TEST_CASE("report examples") {
  BinaryMask gt(16, 16), pred(16, 16);
  for (std::size_t r = 4; r < 6; ++r)
    for (std::size_t c = 4; c < 6; ++c) gt.at(r, c) = pred.at(r, c) = 1;

  const auto same = report(gt, gt);
  CHECK(same.pd == 1.0);
  CHECK(same.fa == 0.0);
  CHECK(same.iou == 1.0);

  const auto empty = report(gt, BinaryMask(16, 16));
  CHECK(empty.pd == 0.0);
  CHECK(empty.fa == 0.0);
  CHECK(empty.iou == 0.0);

  pred.at(14, 14) = 1;
  const auto stray = report(gt, pred);
  CHECK(stray.pd == 1.0);
  CHECK(stray.fa == 1.0 / 256.0);
  CHECK(stray.iou == 4.0 / 5.0);
  CHECK(stray.counts == DetectionCounts{1, 1, 1, 256, 4, 5});

  CHECK_THROWS_AS(report(BinaryMask(4, 4), BinaryMask(4, 4)), DataError);
  CHECK_THROWS_AS(report(gt, BinaryMask(8, 8)), DataError);
}

TEST_CASE("matched pixels outside the target count only against IoU") {
  BinaryMask gt(16, 16), pred(16, 16);
  gt.at(8, 8) = 1;
  for (std::size_t r = 7; r < 10; ++r)
    for (std::size_t c = 7; c < 10; ++c) pred.at(r, c) = 1;
  const auto rep = report(gt, pred);
  CHECK(rep.pd == 1.0);
  CHECK(rep.fa == 0.0);
  CHECK(rep.iou == 1.0 / 9.0);
}

TEST_CASE("counts match the brute-force oracle") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const double density = 0.02 + 0.2 * (trial % 5) / 5.0;
    auto gt = oracle::random_mask(32, 32, density, rng);
    auto pred = oracle::random_mask(32, 32, density, rng);
    if (trial % 3 == 0) {
      // Correlated prediction so many regions actually match.
      pred = gt;
      for (auto& v : pred.data)
        if (rng() % 8 == 0) v = !v;
    }
    if (count_foreground(gt) == 0) gt.at(0, 0) = 1;
    const auto expected = oracle::brute_force_counts(gt, pred, kDefaultCentroidThreshold);
    const auto rep = report(gt, pred);
    CHECK(rep.counts == expected);
    CHECK(rep.pd == static_cast<double>(expected.t_correct) / static_cast<double>(expected.t_all));
    CHECK(rep.counts.t_correct <= std::min<std::uint64_t>(rep.counts.t_all, cluster8(pred).size()));
    CHECK(rep.pd >= 0.0);
    CHECK(rep.pd <= 1.0);
    CHECK(rep.iou <= 1.0);

    // IoU is symmetric when both masks have targets.
    if (count_foreground(pred) > 0) CHECK(report(pred, gt).iou == rep.iou);
  }
}

TEST_CASE("counts are additive") {
  DetectionCounts a{1, 2, 3, 4, 5, 6}, b{10, 20, 30, 40, 50, 60};
  a += b;
  CHECK(a == DetectionCounts{11, 22, 33, 44, 55, 66});
  const auto j = make_report(a).to_json();
  CHECK(j["t_correct"] == 11);
  CHECK(j["pd"].get<double>() == 0.5);
}

TEST_CASE("roc sweep properties") {
  const auto taus = default_tau_grid();
  REQUIRE(taus.size() == 101);
  CHECK(taus.front() == 0.0);
  CHECK(taus.back() == 1.0);
  CHECK_THROWS_AS(default_tau_grid(1), ConfigError);

  std::vector<oracle::RocScene> scenes;
  for (std::size_t i = 0; i < 20; ++i) scenes.push_back(oracle::roc_scene(i, 11));
  std::vector<ScoredScene> scored;
  for (const auto& s : scenes) scored.push_back({&s.score, &s.gt});
  const auto curve = roc_sweep(scored, taus);
  REQUIRE(curve.samples.size() == 101);
  for (std::size_t i = 1; i < curve.samples.size(); ++i) {
    CHECK(curve.samples[i].tau > curve.samples[i - 1].tau);
    CHECK(curve.samples[i].pd <= curve.samples[i - 1].pd);
    CHECK(curve.samples[i].fa <= curve.samples[i - 1].fa);
  }
  CHECK(curve.samples.back().pd == 0.0);
  CHECK(curve.samples.back().fa == 0.0);
  CHECK(curve.samples.front().pd == 1.0);
  CHECK(curve.samples.front().fa > 0.0);

  // Each scene on its own is monotone too.
  for (const auto& s : scenes) {
    const auto single = roc_sweep(s.score, s.gt, taus);
    for (std::size_t i = 1; i < single.samples.size(); ++i) {
      CHECK(single.samples[i].pd <= single.samples[i - 1].pd);
      CHECK(single.samples[i].fa <= single.samples[i - 1].fa);
    }
  }

  const std::vector<double> bad{0.5, 0.5};
  CHECK_THROWS_AS(roc_sweep(scenes[0].score, scenes[0].gt, bad), ConfigError);
}

TEST_CASE("perfect binary predictor detects everything below tau 1") {
  const auto s = oracle::roc_scene(0, 3);
  Raster<double> score(s.gt.height, s.gt.width);
  for (std::size_t i = 0; i < score.size(); ++i) score.data[i] = s.gt.data[i];
  const auto curve = roc_sweep(score, s.gt, default_tau_grid(21));
  for (const auto& sample : curve.samples) {
    CHECK(sample.pd == (sample.tau < 1.0 ? 1.0 : 0.0));
    CHECK(sample.fa == 0.0);
  }
}

TEST_CASE("roc csv format") {
  RocCurve curve;
  curve.samples = {{0.0, 1.0, 0.001}, {0.5, 0.75, 1.0 / 3.0}, {1.0, 0.0, 0.0}};
  std::ostringstream full, proj;
  write_roc_csv(full, curve);
  CHECK(full.str() == "tau,pd,fa\n0,1,0.001\n0.5,0.75,0.333333333\n1,0,0\n");
  write_roc_projection(proj, curve, "fa", "pd");
  CHECK(proj.str() == "fa,pd\n0.001,1\n0.333333333,0.75\n0,0\n");
  std::ostringstream bad;
  CHECK_THROWS_AS(write_roc_projection(bad, curve, "x", "pd"), ConfigError);
}
