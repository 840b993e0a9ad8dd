#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "mtunet/loss.hpp"
#include "oracles.hpp"

using namespace mtunet;

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::vector<double> probabilities(std::span<const double> logits) {
  std::vector<double> p(logits.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = sigmoid(logits[i]);
  return p;
}

struct Case {
  std::vector<double> logits;
  std::vector<std::uint8_t> labels;
  LossConfig config;
};

Case random_case(std::mt19937_64& rng) {
  Case c;
  const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 24)(rng);
  std::uniform_real_distribution<double> logit(-5.0, 5.0);
  std::bernoulli_distribution bit(0.3);
  for (std::size_t i = 0; i < n; ++i) {
    c.logits.push_back(logit(rng));
    c.labels.push_back(bit(rng) ? 1 : 0);
  }
  c.config.gamma = std::uniform_real_distribution<double>(0.0, 4.0)(rng);
  c.config.smooth = std::uniform_real_distribution<double>(0.1, 2.0)(rng);
  return c;
}

// Central differences of `value(logits)` compared with `analytic`.
template <typename F>
double fd_error(const std::vector<double>& logits, std::span<const double> analytic, F value, double h = 1e-6) {
  std::vector<double> numeric(logits.size());
  auto x = logits;
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = logits[i] + h;
    const double up = value(x);
    x[i] = logits[i] - h;
    const double down = value(x);
    x[i] = logits[i];
    numeric[i] = (up - down) / (2.0 * h);
  }
  return oracle::relative_error(analytic, numeric);
}

}  // namespace

TEST_CASE("focal loss examples") {
  const LossConfig cfg;
  const std::vector<double> half{0.5};
  const std::vector<std::uint8_t> one{1};
  CHECK(std::abs(focal_loss(half, one, cfg).value - 0.25 * std::numbers::ln2) < 1e-12);
  CHECK(std::abs(focal_loss(half, one, cfg).value - 0.173287) < 1e-6);

  const std::vector<double> perfect{0.0, 1.0, 1.0, 0.0};
  const std::vector<std::uint8_t> labels{0, 1, 1, 0};
  CHECK(focal_loss(perfect, labels, cfg).value < 1e-5);
  CHECK_THROWS_AS(focal_loss(perfect, one, cfg), DataError);
}

TEST_CASE("gamma 0 is binary cross-entropy") {
  std::mt19937_64 rng(1);
  LossConfig cfg;
  cfg.gamma = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    auto c = random_case(rng);
    const auto p = probabilities(c.logits);
    double bce = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) bce -= c.labels[i] ? std::log(p[i]) : std::log(1.0 - p[i]);
    bce /= static_cast<double>(p.size());
    CHECK(std::abs(focal_loss(p, c.labels, cfg).value - bce) < 1e-12);
  }
}

TEST_CASE("soft IoU examples") {
  const LossConfig cfg;
  const std::vector<double> ones(4, 1.0), zeros(4, 0.0);
  const std::vector<std::uint8_t> y(4, 1);
  CHECK(soft_iou(ones, y, cfg) == 1.0);
  CHECK(soft_iou(zeros, y, cfg) == 0.2);

  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    auto c = random_case(rng);
    auto p = probabilities(c.logits);
    const double s = soft_iou(p, c.labels, c.config);
    CHECK(s > 0.0);
    CHECK(s <= 1.0);
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (!c.labels[i]) continue;
      double prev = soft_iou(p, c.labels, c.config);
      for (double v = p[i]; v <= 1.0; v += 0.05) {
        auto q = p;
        q[i] = v;
        const double cur = soft_iou(q, c.labels, c.config);
        CHECK(cur >= prev - 1e-15);
        prev = cur;
      }
    }
  }
}

TEST_CASE("focal IoU examples and properties") {
  const LossConfig cfg;
  const std::vector<double> exact{1.0, 0.0, 1.0, 0.0};
  const std::vector<std::uint8_t> y{1, 0, 1, 0};
  const auto perfect = focal_iou_loss(exact, y, cfg);
  CHECK(perfect.soft_iou == 1.0);
  CHECK(perfect.value == 0.0);

  // S = 0 reduces to 2 sqrt(FL); S -> 0 needs no overlap and huge union.
  const double fl = 0.3;
  CHECK(2.0 * (1.0 - 0.0) * std::pow(fl, 0.5) == doctest::Approx(2.0 * std::sqrt(fl)));

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    auto c = random_case(rng);
    const auto p = probabilities(c.logits);
    const auto out = focal_iou_loss(p, c.labels, c.config);
    const auto ref = oracle::scalar_loss(p, c.labels, c.config.gamma, c.config.smooth, c.config.epsilon);
    CHECK(std::abs(out.value - ref.focal_iou) < 1e-12);
    CHECK(std::abs(out.focal - ref.focal) < 1e-12);
    CHECK(std::abs(out.soft_iou - ref.soft_iou) < 1e-12);
    CHECK(out.value >= 0.0);
    // S < 1 and FL > 0 here, so the loss is strictly positive.
    if (out.soft_iou < 1.0 && out.focal > 0.0) CHECK(out.value > 0.0);
  }
}

TEST_CASE("focal IoU decreases in S for FL in (0,1]") {
  for (double fl : {1e-6, 0.01, 0.2, 0.7, 1.0}) {
    for (double s = 0.0; s < 1.0; s += 0.01) {
      // dF/dS = FL^((1+S)/2) (-2 + (1 - S) ln FL) < 0
      const double d = std::pow(fl, 0.5 * (1.0 + s)) * (-2.0 + (1.0 - s) * std::log(fl));
      CHECK(d < 0.0);
      const double f0 = 2.0 * (1.0 - s) * std::pow(fl, 0.5 * (1.0 + s));
      const double f1 = 2.0 * (1.0 - (s + 0.01)) * std::pow(fl, 0.5 * (1.0 + s + 0.01));
      CHECK(f1 < f0);
    }
  }
}

TEST_CASE("lower S gives a larger loss curve for y = 1") {
  const LossConfig cfg;
  for (double p = 0.01; p < 1.0; p += 0.01) {
    const double fl = oracle::focal_pixel(p, 1, cfg.gamma, cfg.epsilon);
    auto curve = [&](double s) { return 2.0 * (1.0 - s) * std::pow(fl, 0.5 * (1.0 + s)); };
    CHECK(curve(0.1) > curve(0.5));
    CHECK(curve(0.5) > curve(0.9));
  }
}

TEST_CASE("gradients match finite differences") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    auto c = random_case(rng);
    const auto p = probabilities(c.logits);

    const auto focal = focal_loss(p, c.labels, c.config);
    CHECK(fd_error(c.logits, focal.grad, [&](const std::vector<double>& x) {
            return focal_loss(probabilities(x), c.labels, c.config).value;
          }) < 1e-6);

    const auto fiou = focal_iou_loss(p, c.labels, c.config);
    const double s0 = fiou.soft_iou;
    CHECK(fd_error(c.logits, fiou.grad, [&](const std::vector<double>& x) {
            const double fl = focal_loss(probabilities(x), c.labels, c.config).value;
            return 2.0 * (1.0 - s0) * std::pow(fl, 0.5 * (1.0 + s0));
          }) < 1e-6);

    if (trial % 10 == 0) {
      auto full = c.config;
      full.differentiate_soft_iou = true;
      CHECK(fd_error(c.logits, focal_iou_loss(p, c.labels, full).grad, [&](const std::vector<double>& x) {
              return focal_iou_loss(probabilities(x), c.labels, full).value;
            }) < 1e-6);
      CHECK(fd_error(c.logits, soft_iou_loss(p, c.labels, c.config).grad, [&](const std::vector<double>& x) {
              return soft_iou_loss(probabilities(x), c.labels, c.config).value;
            }) < 1e-6);
    }
  }
}

TEST_CASE("clamped pixels still carry a gradient") {
  const LossConfig cfg;
  const std::vector<double> p{1e-12};
  const std::vector<std::uint8_t> y{1};
  const auto out = focal_loss(p, y, cfg);
  CHECK(std::isfinite(out.value));
  CHECK(out.grad[0] < 0.0);
}

TEST_CASE("loss config validation") {
  LossConfig cfg;
  cfg.gamma = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.smooth = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.epsilon = 0.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
