#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "wstta/nn/tape.hpp"
#include "wstta/nn/tensor.hpp"
#include "wstta/util/rng.hpp"
#include "oracles/oracles.hpp"

namespace testing {

inline wstta::nn::Tensor random_tensor(wstta::nn::Shape shape, wstta::Rng& rng, double lo = -1.0, double hi = 1.0) {
  wstta::nn::Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({1e-7, std::abs(a), std::abs(b)});
}

// Builds a scalar on a fresh tape from one trainable leaf "x" and returns
// the worst relative error between backward() and central differences.
using ScalarFn = std::function<wstta::nn::Var(wstta::nn::Tape&, wstta::nn::Var)>;

inline double max_gradient_error(const ScalarFn& fn, const wstta::nn::Tensor& x0, double h = 1e-5) {
  using namespace wstta::nn;
  Tape tape;
  Var x = tape.parameter("x", x0, true);
  const Gradients g = tape.backward(fn(tape, x));
  const Tensor& analytic = g.at("x");
  std::vector<double> flat(x0.values().begin(), x0.values().end());
  auto eval = [&](const std::vector<double>& v) {
    Tape t;
    Var leaf = t.constant(Tensor(x0.shape(), v));
    return t.value(fn(t, leaf)).item();
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < flat.size(); ++i) {
    const double fd = oracle::central_difference(eval, flat, i, h);
    worst = std::max(worst, relative_error(analytic[i], fd));
  }
  return worst;
}

inline std::vector<double> to_vector(const wstta::nn::Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace testing
