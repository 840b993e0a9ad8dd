#include <doctest.h>

#include <array>
#include <cmath>
#include <numbers>
#include <sstream>

#include "mtunet/checkpoint.hpp"
#include "mtunet/optim.hpp"
#include "op_cases.hpp"
#include "oracles.hpp"

using namespace mtunet;

namespace {

constexpr double kOpTolerance = 1e-6;

Tensor values(Shape shape, std::vector<double> data) { return Tensor(std::move(shape), std::move(data)); }

}  // namespace

TEST_CASE("tensor shape invariants") {
  Tensor t({2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(t.at(1, 2) == 1.5);
  CHECK_FALSE(t.has_grad());
  t.grad_mut()[0] = 2.0;
  CHECK(t.grad().size() == 6);
  t.zero_grad();
  CHECK(t.grad()[0] == 0.0);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DataError);
  CHECK_THROWS_AS(t.reshaped({4}), DataError);
  CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
}

TEST_CASE("non-finite values are rejected") {
  Graph g;
  CHECK_THROWS_AS(g.constant(values({2}, {1.0, NAN})), NumericError);
  Var x = g.constant(values({1}, {1e308}));
  CHECK_THROWS_AS(ops::mul(g, x, x), NumericError);
}

TEST_CASE("conv2d examples") {
  Graph g;
  std::mt19937_64 rng(1);
  const Tensor img = oracle::random_tensor({1, 3, 3}, rng);
  Var out = ops::conv2d(g, g.constant(img), g.constant(values({1, 1, 1, 1}, {1.0})), 1, 0);
  CHECK(g.value(out).shape() == Shape{1, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) CHECK(g.value(out)[i] == img[i]);

  Var y = ops::conv2d(g, g.constant(values({1, 2, 2}, {1, 2, 3, 4})), g.constant(Tensor({1, 1, 2, 2}, 1.0)), 1, 0);
  CHECK(g.value(y).shape() == Shape{1, 1, 1});
  CHECK(g.value(y)[0] == 10.0);

  Var s = ops::conv2d(g, g.constant(Tensor({2, 7, 7}, 1.0)), g.constant(Tensor({3, 2, 3, 3}, 1.0)), 2, 1);
  CHECK(g.value(s).shape() == Shape{3, 4, 4});
  CHECK_THROWS_AS(ops::conv2d(g, g.constant(Tensor({2, 4, 4})), g.constant(Tensor({1, 3, 3, 3})), 1, 1), DataError);
}

TEST_CASE("linear examples") {
  Graph g;
  Var y = ops::linear(g, g.constant(values({1, 2}, {1, 2})), g.constant(values({2, 2}, {1, 0, 0, 1})),
                      g.constant(values({2}, {1, 1})));
  CHECK(g.value(y)[0] == 2.0);
  CHECK(g.value(y)[1] == 3.0);
  CHECK_THROWS_AS(ops::linear(g, g.constant(Tensor({1, 3})), g.constant(Tensor({2, 2})), g.constant(Tensor({2}))),
                  DataError);
}

TEST_CASE("softmax rows") {
  Graph g;
  Var u = ops::softmax_rows(g, g.constant(Tensor({1, 4}, 3.0)));
  for (double v : g.value(u).data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
  Var s = ops::softmax_rows(g, g.constant(values({1, 2}, {0.0, std::log(3.0)})));
  CHECK(std::abs(g.value(s)[0] - 0.25) < 1e-15);
  CHECK(std::abs(g.value(s)[1] - 0.75) < 1e-15);

  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Var r = ops::softmax_rows(g, g.constant(oracle::random_tensor({5, 7}, rng, -50.0, 50.0)));
    const Tensor& t = g.value(r);
    for (std::size_t i = 0; i < 5; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        CHECK(t.at(i, j) >= 0.0);
        sum += t.at(i, j);
      }
      CHECK(std::abs(sum - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("layer norm") {
  Graph g;
  Var gain = g.constant(Tensor({2}, 1.0)), shift = g.constant(Tensor({2}, 0.0));
  Var c = ops::layer_norm(g, g.constant(Tensor({1, 2}, 5.0)), gain, shift, 1e-5);
  CHECK(g.value(c)[0] == 0.0);
  CHECK(g.value(c)[1] == 0.0);
  Var h = ops::layer_norm(g, g.constant(values({1, 2}, {1, 3})), gain, shift, 1e-12);
  CHECK(std::abs(g.value(h)[0] + 1.0) < 1e-9);
  CHECK(std::abs(g.value(h)[1] - 1.0) < 1e-9);

  std::mt19937_64 rng(3);
  Var gain8 = g.constant(Tensor({8}, 1.0)), shift8 = g.constant(Tensor({8}, 0.0));
  Var r = ops::layer_norm(g, g.constant(oracle::random_tensor({6, 8}, rng, -10, 10)), gain8, shift8, 1e-5);
  for (std::size_t i = 0; i < 6; ++i) {
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 8; ++j) mean += g.value(r).at(i, j) / 8.0;
    for (std::size_t j = 0; j < 8; ++j) var += std::pow(g.value(r).at(i, j) - mean, 2) / 8.0;
    CHECK(std::abs(mean) < 1e-8);
    CHECK(std::abs(var - 1.0) < 1e-6);
  }
}

TEST_CASE("elementwise examples") {
  Graph g;
  CHECK(g.value(ops::sigmoid(g, g.constant(Tensor({1}, 0.0))))[0] == 0.5);
  Var up = ops::upsample_bilinear2x(g, g.constant(Tensor({2, 3, 5}, 0.7)));
  CHECK(g.value(up).shape() == Shape{2, 6, 10});
  for (double v : g.value(up).data()) CHECK(v == doctest::Approx(0.7).epsilon(1e-15));
  Var pooled = ops::adaptive_avg_pool(g, g.constant(Tensor({1, 4, 4}, 1.0)), 2, 2);
  CHECK(g.value(pooled).shape() == Shape{1, 2, 2});
  for (double v : g.value(pooled).data()) CHECK(v == 1.0);
  Var odd = ops::adaptive_avg_pool(g, g.constant(values({1, 1, 3}, {1, 2, 3})), 1, 2);
  CHECK(g.value(odd)[0] == 1.5);  // bins [0,2) and [1,3)
  CHECK(g.value(odd)[1] == 2.5);

  const std::array<Var, 2> parts{g.constant(Tensor({1, 2, 2}, 1.0)), g.constant(Tensor({2, 2, 2}, 2.0))};
  Var cat = ops::concat_channels(g, parts);
  CHECK(g.value(cat).shape() == Shape{3, 2, 2});
  CHECK(g.value(cat)[3] == 1.0);
  CHECK(g.value(cat)[4] == 2.0);
}

TEST_CASE("upsample uses half-pixel centres") {
  Graph g;
  Var up = ops::upsample_bilinear2x(g, g.constant(values({1, 1, 2}, {0.0, 4.0})));
  const Tensor& t = g.value(up);
  // Output centres map to -0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped to 1).
  CHECK(t[0] == 0.0);
  CHECK(t[1] == 1.0);
  CHECK(t[2] == 3.0);
  CHECK(t[3] == 4.0);
}

TEST_CASE("max pool tie goes to the first index") {
  Graph g;
  Var x = g.variable(values({1, 2, 2}, {3, 3, 3, 1}));
  Var y = ops::max_pool2d(g, x);
  CHECK(g.value(y)[0] == 3.0);
  g.backward(ops::sum(g, y));
  const auto grad = g.grad(x);
  CHECK(grad[0] == 1.0);
  CHECK(grad[1] == 0.0);
  CHECK(grad[2] == 0.0);
  CHECK(grad[3] == 0.0);
}

TEST_CASE("patchify round trip and layout") {
  Graph g;
  std::mt19937_64 rng(4);
  const Tensor x = oracle::random_tensor({3, 8, 8}, rng);
  Var tokens = ops::patchify(g, g.constant(x), 4);
  CHECK(g.value(tokens).shape() == Shape{4, 48});
  // token 1 is the top-right patch; its element (c=2, r=1, c=3)
  CHECK(g.value(tokens).at(1, 2 * 16 + 1 * 4 + 3) == x.at(2, 1, 7));
  Var back = ops::unpatchify(g, tokens, 3, 8, 8, 4);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(g.value(back)[i] == x[i]);
  CHECK_THROWS_AS(ops::patchify(g, g.constant(x), 3), DataError);
}

TEST_CASE("backward examples") {
  Graph g;
  Var x = g.variable(values({3}, {1, 2, 3}));
  g.backward(ops::sum(g, x));
  for (double v : g.grad(x)) CHECK(v == 1.0);

  Graph h;
  Var y = h.variable(values({2}, {1, 2}));
  h.backward(ops::sum(h, ops::mul(h, y, y)));
  CHECK(h.grad(y)[0] == 2.0);
  CHECK(h.grad(y)[1] == 4.0);

  Graph f;
  Var z = f.variable(values({2}, {1, 2}));
  Var fan = ops::add(f, ops::scale(f, z, 3.0), z);  // fan-out accumulates
  f.backward(ops::sum(f, fan));
  CHECK(f.grad(z)[0] == 4.0);
  CHECK_THROWS_AS(f.backward(fan), DataError);
}

TEST_CASE("backward is deterministic") {
  std::mt19937_64 rng(5);
  const Tensor x = oracle::random_tensor({2, 6, 6}, rng);
  const Tensor w = oracle::random_tensor({3, 2, 3, 3}, rng);
  auto run = [&] {
    Graph g;
    Var vx = g.variable(x), vw = g.variable(w);
    g.backward(ops::sum(g, ops::sigmoid(g, ops::conv2d(g, vx, vw, 1, 1))));
    std::vector<double> out(g.grad(vw).begin(), g.grad(vw).end());
    out.insert(out.end(), g.grad(vx).begin(), g.grad(vx).end());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("finite-difference checks for every differentiable op") {
  for (const auto& c : oracle::op_cases(6)) {
    INFO(c.name);
    CHECK(oracle::gradcheck(c.build, c.inputs, c.seed) < kOpTolerance);
  }
}

TEST_CASE("xavier bounds") {
  for (const Shape& s : {Shape{8, 4, 3, 3}, Shape{16, 32}, Shape{5}}) {
    const double bound = xavier_bound(s);
    const Tensor t = xavier_init(s, 9);
    for (double v : t.data()) CHECK(std::abs(v) <= bound);
  }
  CHECK(xavier_bound({16, 32}) == doctest::Approx(std::sqrt(6.0 / 48.0)));
  CHECK(xavier_bound({8, 4, 3, 3}) == doctest::Approx(std::sqrt(6.0 / (36.0 + 72.0))));
  CHECK(xavier_init({4, 4}, 3).data()[0] == xavier_init({4, 4}, 3).data()[0]);
}

TEST_CASE("cosine schedule") {
  const CosineSchedule s{0.05, 0.001, 100};
  CHECK(cosine_lr(0, s) == 0.05);
  CHECK(cosine_lr(100, s) == doctest::Approx(0.001).epsilon(1e-15));
  CHECK(cosine_lr(50, s) == doctest::Approx(0.0255));
  for (std::size_t step = 0; step <= 300; ++step) {
    CHECK(cosine_lr(step, s) >= 0.001 - 1e-15);
    CHECK(cosine_lr(step, s) <= 0.05);
  }
}

TEST_CASE("adagrad") {
  Tensor p({3}, 1.0);
  Tensor q({2}, 1.0);  // never receives a gradient
  std::vector<Tensor*> params{&p, &q};
  OptimizerState state;
  state.schedule = {0.05, 0.0, 10};
  const double g = -0.3;
  for (double& v : p.grad_mut()) v = g;
  p.grad_mut()[2] = 0.0;
  adagrad_step(params, state);
  CHECK(p[0] - 1.0 == doctest::Approx(-0.05 * g / std::abs(g)).epsilon(1e-9));
  CHECK(p[0] == doctest::Approx(1.05));
  CHECK(p[2] == 1.0);  // zero gradient, zero update
  CHECK(q[0] == 1.0);
  CHECK(state.step == 1);

  std::mt19937_64 rng(7);
  std::vector<double> before = state.accumulators[0];
  for (int i = 0; i < 20; ++i) {
    for (double& v : p.grad_mut()) v = std::normal_distribution<double>(0, 1)(rng);
    adagrad_step(params, state);
    for (std::size_t j = 0; j < before.size(); ++j) {
      CHECK(state.accumulators[0][j] >= before[j]);
      CHECK(state.accumulators[0][j] >= 0.0);
    }
    before = state.accumulators[0];
  }
}

TEST_CASE("checkpoint round trip is exact at f32") {
  std::mt19937_64 rng(8);
  Checkpoint ck;
  ck.config = {{"k", 2}, {"note", "x"}};
  ck.tensors.push_back({"a", oracle::random_tensor({3, 4}, rng)});
  ck.tensors.push_back({"b", oracle::random_tensor({5}, rng, -1e6, 1e6)});
  for (auto& t : ck.tensors) {
    for (double& v : t.tensor.data()) v = static_cast<float>(v);
  }
  std::stringstream buf;
  write_checkpoint(buf, ck);
  CHECK(buf.str().substr(0, 4) == "MTUW");
  const Checkpoint back = read_checkpoint(buf);
  CHECK(back.config == ck.config);
  REQUIRE(back.tensors.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back.tensors[i].name == ck.tensors[i].name);
    CHECK(back.tensors[i].tensor.shape() == ck.tensors[i].tensor.shape());
    for (std::size_t j = 0; j < ck.tensors[i].tensor.numel(); ++j) {
      CHECK(back.tensors[i].tensor[j] == ck.tensors[i].tensor[j]);
    }
  }

  std::stringstream bad("MTUX....");
  CHECK_THROWS_AS(read_checkpoint(bad), DataError);
  std::string truncated = buf.str();
  truncated.resize(truncated.size() - 3);
  std::stringstream cut(truncated);
  CHECK_THROWS_AS(read_checkpoint(cut), DataError);
}
