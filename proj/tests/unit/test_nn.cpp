#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "wstta/nn/batch_norm.hpp"
#include "wstta/nn/ops.hpp"

using namespace wstta;
using namespace wstta::nn;
using testing::max_gradient_error;
using testing::random_tensor;

TEST_SUITE("nn") {

TEST_CASE("tensor construction and errors name the axis") {
  Tensor t(Shape{2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.at(1, 2) == 1.5);
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(t.reshaped(Shape{4}), DimensionError);
  CHECK_THROWS_AS(t.item(), DimensionError);
  CHECK(Tensor::scalar(3).item() == 3);
}

TEST_CASE("conv2d identity kernel reproduces the input") {
  Rng rng(1);
  Tensor x = random_tensor({1, 1, 3, 3}, rng);
  Tensor w(Shape{1, 1, 3, 3}, 0.0);
  w.at(0, 0, 1, 1) = 1.0;
  CHECK(kernel::conv2d(x, w, Tensor(Shape{1}, 0.0), 1, 1) == x);
}

TEST_CASE("conv2d bias only") {
  Rng rng(2);
  Tensor y = kernel::conv2d(Tensor(Shape{1, 2, 4, 4}, 0.0), random_tensor({3, 2, 3, 3}, rng), Tensor(Shape{3}, 0.5), 1, 1);
  for (double v : y.values()) CHECK(v == 0.5);
}

TEST_CASE("conv2d matches the quadruple-loop oracle") {
  Rng rng(3);
  for (auto [stride, pad, k] : {std::tuple{1u, 1u, 3u}, {1u, 0u, 1u}, {2u, 1u, 3u}, {1u, 2u, 5u}}) {
    const std::size_t h = 5;
    Tensor x = random_tensor({1, 2, h, h}, rng);
    Tensor w = random_tensor({3, 2, k, k}, rng);
    Tensor b = random_tensor({3}, rng);
    Tensor y = kernel::conv2d(x, w, b, stride, pad);
    auto ref = oracle::conv2d(testing::to_vector(x), 1, 2, h, h, testing::to_vector(w), 3, k, k, testing::to_vector(b),
                              stride, pad);
    REQUIRE(ref.size() == y.size());
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(ref[i] - y[i]) < 1e-12);
  }
}

TEST_CASE("conv2d shape errors name the axis") {
  Tape tape;
  Var x = tape.constant(Tensor(Shape{1, 2, 5, 5}));
  Var w = tape.constant(Tensor(Shape{3, 4, 3, 3}));
  Var b = tape.constant(Tensor(Shape{3}));
  try {
    conv2d(tape, x, w, b, 1, 1);
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    CHECK(e.axis() == "channels");
  }
  Var w2 = tape.constant(Tensor(Shape{3, 2, 3, 3}));
  Var b2 = tape.constant(Tensor(Shape{2}));
  try {
    conv2d(tape, x, w2, b2, 1, 1);
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    CHECK(e.axis() == "filters");
  }
}

TEST_CASE("softmax examples") {
  Tensor even = kernel::softmax_rows(Tensor::matrix(1, 4, {2, 2, 2, 2}));
  for (double v : even.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
  Tensor s = kernel::softmax_rows(Tensor::matrix(1, 2, {1, 0}));
  CHECK(s[0] == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK(s[1] == doctest::Approx(0.2689).epsilon(1e-4));
  Tensor c = kernel::softmax_cols(Tensor::matrix(2, 1, {1, 0}));
  CHECK(c[0] == doctest::Approx(0.7311).epsilon(1e-4));
}

TEST_CASE("maxpool of a constant is constant") {
  Tape tape;
  Var y = maxpool2(tape, tape.constant(Tensor(Shape{1, 2, 6, 6}, 0.7)));
  CHECK(tape.value(y).shape() == Shape{1, 2, 3, 3});
  for (double v : tape.value(y).values()) CHECK(v == 0.7);
}

TEST_CASE("relu indicator gradient") {
  Tape tape;
  Var x = tape.parameter("x", Tensor::vector({-1, 2}), true);
  Gradients g = tape.backward(sum(tape, relu(tape, x)));
  CHECK(g.at("x")[0] == 0.0);
  CHECK(g.at("x")[1] == 1.0);
}

TEST_CASE("backward rejects foreign and non-scalar handles") {
  Tape a, b;
  Var x = a.parameter("x", Tensor::vector({1, 2}), true);
  CHECK_THROWS_AS(b.backward(x), UsageError);
  CHECK_THROWS_AS(a.backward(x), UsageError);
  CHECK_THROWS_AS(a.parameter("x", Tensor::scalar(1), true), UsageError);
}

TEST_CASE("gradients of every tape op match finite differences") {
  Rng rng(11);
  auto away_from_zero = [&](Shape s) {
    Tensor t = random_tensor(std::move(s), rng, 0.1, 1.0);
    for (double& v : t.values()) v *= rng.bernoulli(0.5) ? 1.0 : -1.0;
    return t;
  };
  const Tensor w_conv = random_tensor({2, 2, 3, 3}, rng);
  const Tensor w_dense = random_tensor({3, 4}, rng);
  const Tensor weights = random_tensor({2, 3}, rng);
  const Tensor probe = random_tensor({1, 2, 4, 4}, rng);

  SUBCASE("conv2d input") {
    CHECK(max_gradient_error(
              [&](Tape& t, Var x) {
                return sum(t, mul(t, conv2d(t, x, t.constant(w_conv), t.constant(Tensor(Shape{2}, 0.1)), 1, 1),
                                  t.constant(probe)));
              },
              random_tensor({1, 2, 4, 4}, rng)) < 1e-6);
  }
  SUBCASE("conv2d weights and bias") {
    const Tensor x = random_tensor({2, 2, 5, 5}, rng);
    CHECK(max_gradient_error(
              [&](Tape& t, Var w) {
                Var y = conv2d(t, t.constant(x), w, t.constant(Tensor(Shape{2}, 0.0)), 2, 1);
                return sum(t, mul(t, y, y));
              },
              w_conv) < 1e-6);
    CHECK(max_gradient_error(
              [&](Tape& t, Var b) {
                Var y = conv2d(t, t.constant(x), t.constant(w_conv), b, 1, 1);
                return sum(t, mul(t, y, y));
              },
              Tensor::vector({0.3, -0.2})) < 1e-6);
  }
  SUBCASE("relu, maxpool, reshape") {
    CHECK(max_gradient_error(
              [](Tape& t, Var x) {
                Var y = reshape(t, maxpool2(t, relu(t, x)), Shape{8});
                return sum(t, mul(t, y, y));
              },
              away_from_zero({1, 2, 4, 5})) < 1e-6);
  }
  SUBCASE("dense") {
    CHECK(max_gradient_error(
              [&](Tape& t, Var x) {
                Var y = dense(t, x, t.constant(w_dense), t.constant(Tensor::vector({0.1, 0.2, 0.3})));
                return sum(t, mul(t, y, y));
              },
              random_tensor({2, 4}, rng)) < 1e-6);
    const Tensor x = random_tensor({2, 4}, rng);
    CHECK(max_gradient_error(
              [&](Tape& t, Var w) {
                Var y = dense(t, t.constant(x), w, t.constant(Tensor::vector({0.1, 0.2, 0.3})));
                return sum(t, mul(t, y, y));
              },
              w_dense) < 1e-6);
  }
  SUBCASE("softmax rows and cols, sigmoid") {
    CHECK(max_gradient_error(
              [&](Tape& t, Var x) { return sum(t, mul(t, softmax_rows(t, x), t.constant(weights))); },
              random_tensor({2, 3}, rng)) < 1e-6);
    CHECK(max_gradient_error(
              [&](Tape& t, Var x) { return sum(t, mul(t, softmax_cols(t, x), t.constant(weights))); },
              random_tensor({2, 3}, rng)) < 1e-6);
    CHECK(max_gradient_error(
              [&](Tape& t, Var x) { return sum(t, mul(t, sigmoid(t, x), t.constant(weights))); },
              random_tensor({2, 3}, rng)) < 1e-6);
  }
  SUBCASE("gather, slice, place_in_columns, sum_rows, scale, add") {
    CHECK(max_gradient_error(
              [&](Tape& t, Var x) {
                Var g = gather(t, x, {0, 2, 2, 5}, Shape{2, 2});
                Var s = slice_cols(t, x, 1, 3);
                Var p = place_in_columns(t, gather(t, x, {1, 4}, Shape{2}), {2, 0}, 3);
                Var r = sum_rows(t, mul(t, p, t.constant(weights)));
                return add(t, add(t, sum(t, mul(t, g, g)), scale(t, sum(t, mul(t, s, s)), 0.5)),
                           sum(t, mul(t, r, r)));
              },
              random_tensor({2, 3}, rng)) < 1e-6);
  }
  SUBCASE("losses") {
    CHECK(max_gradient_error(
              [](Tape& t, Var x) { return bce_with_logits(t, x, {1, 0, 1, 0}, {1, 1, 0, 2}); },
              random_tensor({4}, rng, -2, 2)) < 1e-6);
    CHECK(max_gradient_error([](Tape& t, Var x) { return softmax_cross_entropy(t, x, {2, -1, 0}); },
                             random_tensor({3, 3}, rng, -2, 2)) < 1e-6);
    CHECK(max_gradient_error([](Tape& t, Var x) { return binary_cross_entropy(t, x, {1, 0, 1}, 1e-7); },
                             random_tensor({3}, rng, 0.1, 0.9)) < 1e-6);
    CHECK(max_gradient_error(
              [](Tape& t, Var x) { return smooth_l1(t, x, {0.0, 0.0, 0.0, 0.0}, {1, 1, 1, 0}, 0.1, 2.0); },
              Tensor::vector({0.05, -0.03, 0.5, 0.2})) < 1e-6);
  }
}

TEST_CASE("loss closed forms") {
  Tape t;
  CHECK(t.value(bce_with_logits(t, t.constant(Tensor(Shape{5}, 0.0)), {1, 0, 1, 0, 1}, {1, 1, 1, 1, 1})).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(t.value(softmax_cross_entropy(t, t.constant(Tensor(Shape{2, 4}, 0.0)), {0, 3})).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-14));
  CHECK(t.value(bce_with_logits(t, t.constant(Tensor(Shape{2}, 0.0)), {1, 0}, {0, 0})).item() == 0.0);
}

TEST_CASE("tape replays and visits nodes in reverse order") {
  Rng rng(4);
  Tape tape;
  Var x = tape.parameter("x", random_tensor({2, 3}, rng), true);
  Var y = sum(tape, mul(tape, softmax_rows(tape, x), x));
  tape.backward(y);
  CHECK(tape.replay_matches());
  const auto& order = tape.last_backward_order();
  REQUIRE(!order.empty());
  for (std::size_t i = 1; i < order.size(); ++i) CHECK(order[i] < order[i - 1]);
}

TEST_CASE("batch norm {1,3} example") {
  BatchNormLayer layer(1);
  Tensor x(Shape{1, 1, 1, 2}, std::vector<double>{1, 3});
  BatchNormForward f = batchnorm_forward(layer, x, BnMode::adapt);
  CHECK(f.batch_mean[0] == 2.0);
  CHECK(f.batch_var[0] == 1.0);
  const double expected = 1.0 / std::sqrt(1.0 + 1e-5);
  CHECK(f.output[0] == doctest::Approx(-expected).epsilon(1e-14));
  CHECK(f.output[1] == doctest::Approx(expected).epsilon(1e-14));
  CHECK(expected == doctest::Approx(0.999995).epsilon(1e-6));
}

TEST_CASE("batch norm with zero scale outputs beta") {
  Rng rng(5);
  BatchNormLayer layer(3);
  layer.gamma.fill(0.0);
  layer.beta = Tensor::vector({0.5, -1, 2});
  BatchNormForward f = batchnorm_forward(layer, random_tensor({2, 3, 4, 4}, rng), BnMode::adapt);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 32; ++i) CHECK(f.output[(i / 16 * 3 + c) * 16 + i % 16] == layer.beta[c]);
}

TEST_CASE("eval mode with matched statistics equals adapt mode") {
  Rng rng(6);
  BatchNormLayer layer(3);
  layer.gamma = Tensor::vector({1.2, 0.7, -0.3});
  layer.beta = Tensor::vector({0.1, 0.0, 0.4});
  Tensor x = random_tensor({2, 3, 5, 5}, rng);
  BatchNormForward a = batchnorm_forward(layer, x, BnMode::adapt);
  layer.running_mean = Tensor::vector(a.batch_mean);
  layer.running_var = Tensor::vector(a.batch_var);
  BatchNormForward e = batchnorm_forward(layer, x, BnMode::eval);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(a.output[i] - e.output[i]) < 1e-12);
}

TEST_CASE("batch norm statistics match a naive computation") {
  Rng rng(7);
  BatchNormLayer layer(2);
  Tensor x = random_tensor({3, 2, 4, 3}, rng);
  BatchNormForward f = batchnorm_forward(layer, x, BnMode::adapt);
  for (std::size_t c = 0; c < 2; ++c) {
    std::vector<double> v;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t z = 0; z < 3; ++z) v.push_back(x.at(n, c, y, z));
    double mean = 0;
    for (double a : v) mean += a / static_cast<double>(v.size());
    double var = 0;
    for (double a : v) var += (a - mean) * (a - mean) / static_cast<double>(v.size());
    CHECK(std::abs(f.batch_mean[c] - mean) < 1e-12);
    CHECK(std::abs(f.batch_var[c] - var) < 1e-12);
  }
}

TEST_CASE("beta gradient counts normalized elements") {
  Rng rng(8);
  BatchNormLayer layer(2);
  Tape tape;
  Var x = tape.constant(random_tensor({2, 2, 3, 3}, rng));
  Var g = tape.parameter("g", layer.gamma, true);
  Var b = tape.parameter("b", layer.beta, true);
  BatchNormResult r = batchnorm(tape, x, g, b, layer, BnMode::adapt);
  Gradients grads = tape.backward(sum(tape, r.output));
  CHECK(grads.at("b")[0] == doctest::Approx(18.0));
  CHECK(grads.at("b")[1] == doctest::Approx(18.0));
}

TEST_CASE("batch norm affine and input gradients match finite differences") {
  Rng rng(9);
  BatchNormLayer layer(2);
  const Tensor x = random_tensor({2, 2, 3, 3}, rng);
  const Tensor w = random_tensor({2, 2, 3, 3}, rng);
  for (BnMode mode : {BnMode::adapt, BnMode::eval}) {
    CHECK(max_gradient_error(
              [&](Tape& t, Var g) {
                BatchNormResult r = batchnorm(t, t.constant(x), g, t.constant(Tensor::vector({0.1, -0.1})), layer, mode);
                return sum(t, mul(t, r.output, t.constant(w)));
              },
              Tensor::vector({1.3, 0.6})) < 1e-6);
    CHECK(max_gradient_error(
              [&](Tape& t, Var in) {
                BatchNormResult r = batchnorm(t, in, t.constant(Tensor::vector({1.3, 0.6})),
                                              t.constant(Tensor::vector({0.1, -0.1})), layer, mode);
                return sum(t, mul(t, r.output, t.constant(w)));
              },
              x) < 1e-5);
  }
}

TEST_CASE("running statistics update") {
  BatchNormLayer layer(1);
  update_running_stats(layer, std::vector<double>{2.0}, std::vector<double>{3.0}, 0.1);
  CHECK(layer.running_mean[0] == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(layer.running_var[0] == doctest::Approx(1.2).epsilon(1e-15));
  update_running_stats(layer, std::vector<double>{5.0}, std::vector<double>{7.0}, 1.0);
  CHECK(layer.running_mean[0] == 5.0);
  CHECK(layer.running_var[0] == 7.0);
  BatchNormLayer before = layer;
  update_running_stats(layer, std::vector<double>{9.0}, std::vector<double>{9.0}, 0.0);
  CHECK(layer == before);
  CHECK_THROWS_AS(update_running_stats(layer, std::vector<double>{1, 2}, std::vector<double>{1, 2}, 0.5),
                  DimensionError);
}

TEST_CASE("batch norm rejects a channel mismatch") {
  BatchNormLayer layer(3);
  try {
    batchnorm_forward(layer, Tensor(Shape{1, 2, 2, 2}), BnMode::adapt);
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    CHECK(e.axis() == "channels");
  }
}

}
