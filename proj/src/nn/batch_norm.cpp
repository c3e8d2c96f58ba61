#include "wstta/nn/batch_norm.hpp"

#include <cmath>

namespace wstta::nn {

BatchNormLayer::BatchNormLayer(std::size_t c)
    : channels(c),
      gamma(Shape{c}, 1.0),
      beta(Shape{c}, 0.0),
      running_mean(Shape{c}, 0.0),
      running_var(Shape{c}, 1.0) {}

void BatchNormLayer::validate() const {
  if (channels == 0) throw UsageError("batch norm needs at least one channel");
  for (const Tensor* t : {&gamma, &beta, &running_mean, &running_var}) {
    if (t->size() != channels) throw DimensionError("channels", "batch norm parameter length != channels");
  }
  for (double v : running_var.values()) {
    if (!(v >= 0.0)) throw UsageError("batch norm running_var must be non-negative");
  }
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw UsageError("batch norm momentum must lie in [0,1]");
  if (!(epsilon > 0.0)) throw UsageError("batch norm epsilon must be positive");
}

namespace {

struct Stats {
  std::vector<double> mean, var;
};

Stats channel_stats(const Tensor& x) {
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  const double count = static_cast<double>(n * plane);
  Stats s{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    double total = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const double* p = x.data() + (b * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) total += p[i];
    }
    const double mean = total / count;
    double sq = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const double* p = x.data() + (b * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - mean) * (p[i] - mean);
    }
    s.mean[ch] = mean;
    s.var[ch] = sq / count;
  }
  return s;
}

void check_input(const Tensor& x, const BatchNormLayer& layer, BnMode mode) {
  if (x.rank() != 4) throw DimensionError("rank", "batch norm expects [N,C,H,W], got " + shape_to_string(x.shape()));
  if (x.dim(1) != layer.channels) {
    throw DimensionError("channels", "input has " + std::to_string(x.dim(1)) + " channels, layer has " +
                                         std::to_string(layer.channels));
  }
  if (mode == BnMode::adapt && x.dim(0) * x.dim(2) * x.dim(3) < 2) {
    throw DimensionError("batch", "adapt mode needs at least two values per channel");
  }
}

}  // namespace

BatchNormResult batchnorm(Tape& tape, Var input, Var gamma, Var beta, const BatchNormLayer& layer, BnMode mode) {
  const Tensor& x = tape.value(input);
  check_input(x, layer, mode);
  if (tape.value(gamma).size() != layer.channels || tape.value(beta).size() != layer.channels) {
    throw DimensionError("channels", "gamma/beta length != channels");
  }
  BatchNormResult result;
  const double eps = layer.epsilon;

  if (mode == BnMode::adapt) {
    Stats s = channel_stats(x);
    result.batch_mean = s.mean;
    result.batch_var = s.var;
    auto forward = [eps](std::span<const Tensor* const> in) {
      const Tensor& t = *in[0];
      const Tensor& g = *in[1];
      const Tensor& b = *in[2];
      const Stats st = channel_stats(t);
      Tensor out(t.shape());
      const std::size_t n = t.dim(0), c = t.dim(1), plane = t.dim(2) * t.dim(3);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double inv = 1.0 / std::sqrt(st.var[ch] + eps);
        for (std::size_t bi = 0; bi < n; ++bi) {
          const std::size_t off = (bi * c + ch) * plane;
          for (std::size_t i = 0; i < plane; ++i) out[off + i] = g[ch] * ((t[off + i] - st.mean[ch]) * inv) + b[ch];
        }
      }
      return out;
    };
    auto backward = [eps](std::span<const Tensor* const> in, const Tensor&, const Tensor& gout,
                          std::span<Tensor* const> gin) {
      const Tensor& t = *in[0];
      const Tensor& g = *in[1];
      const Stats st = channel_stats(t);
      const std::size_t n = t.dim(0), c = t.dim(1), plane = t.dim(2) * t.dim(3);
      const double m = static_cast<double>(n * plane);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double inv = 1.0 / std::sqrt(st.var[ch] + eps);
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t bi = 0; bi < n; ++bi) {
          const std::size_t off = (bi * c + ch) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            const double xhat = (t[off + i] - st.mean[ch]) * inv;
            sum_dy += gout[off + i];
            sum_dy_xhat += gout[off + i] * xhat;
          }
        }
        if (gin[1]) (*gin[1])[ch] += sum_dy_xhat;
        if (gin[2]) (*gin[2])[ch] += sum_dy;
        if (gin[0]) {
          const double k = g[ch] * inv / m;
          for (std::size_t bi = 0; bi < n; ++bi) {
            const std::size_t off = (bi * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              const double xhat = (t[off + i] - st.mean[ch]) * inv;
              (*gin[0])[off + i] += k * (m * gout[off + i] - sum_dy - xhat * sum_dy_xhat);
            }
          }
        }
      }
    };
    result.output = tape.record("batchnorm_adapt", {input, gamma, beta}, forward, backward);
    return result;
  }

  std::vector<double> mean(layer.running_mean.values().begin(), layer.running_mean.values().end());
  std::vector<double> inv(layer.channels);
  for (std::size_t ch = 0; ch < layer.channels; ++ch) inv[ch] = 1.0 / std::sqrt(layer.running_var[ch] + eps);
  auto forward = [mean, inv](std::span<const Tensor* const> in) {
    const Tensor& t = *in[0];
    const Tensor& g = *in[1];
    const Tensor& b = *in[2];
    Tensor out(t.shape());
    const std::size_t n = t.dim(0), c = t.dim(1), plane = t.dim(2) * t.dim(3);
    for (std::size_t bi = 0; bi < n; ++bi)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t off = (bi * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) out[off + i] = g[ch] * ((t[off + i] - mean[ch]) * inv[ch]) + b[ch];
      }
    return out;
  };
  auto backward = [mean, inv](std::span<const Tensor* const> in, const Tensor&, const Tensor& gout,
                              std::span<Tensor* const> gin) {
    const Tensor& t = *in[0];
    const Tensor& g = *in[1];
    const std::size_t n = t.dim(0), c = t.dim(1), plane = t.dim(2) * t.dim(3);
    for (std::size_t bi = 0; bi < n; ++bi)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t off = (bi * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double xhat = (t[off + i] - mean[ch]) * inv[ch];
          if (gin[0]) (*gin[0])[off + i] += gout[off + i] * g[ch] * inv[ch];
          if (gin[1]) (*gin[1])[ch] += gout[off + i] * xhat;
          if (gin[2]) (*gin[2])[ch] += gout[off + i];
        }
      }
  };
  result.output = tape.record("batchnorm_eval", {input, gamma, beta}, forward, backward);
  return result;
}

void update_running_stats(BatchNormLayer& layer, std::span<const double> batch_mean,
                          std::span<const double> batch_var, double momentum) {
  if (batch_mean.size() != layer.channels || batch_var.size() != layer.channels) {
    throw DimensionError("channels", "batch statistics length != channels");
  }
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw UsageError("momentum must lie in [0,1]");
  for (std::size_t c = 0; c < layer.channels; ++c) {
    layer.running_mean[c] = (1.0 - momentum) * layer.running_mean[c] + momentum * batch_mean[c];
    layer.running_var[c] = (1.0 - momentum) * layer.running_var[c] + momentum * batch_var[c];
  }
}

BatchNormForward batchnorm_forward(const BatchNormLayer& layer, const Tensor& input, BnMode mode) {
  Tape tape;
  const Var x = tape.constant(input);
  const Var g = tape.constant(layer.gamma);
  const Var b = tape.constant(layer.beta);
  BatchNormResult r = batchnorm(tape, x, g, b, layer, mode);
  return BatchNormForward{tape.value(r.output), std::move(r.batch_mean), std::move(r.batch_var)};
}

}  // namespace wstta::nn
