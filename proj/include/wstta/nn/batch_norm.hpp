#pragma once

#include <span>
#include <vector>

#include "wstta/nn/tape.hpp"
#include "wstta/nn/tensor.hpp"

namespace wstta::nn {

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kDefaultMomentum = 0.1;

/// Per-channel batch normalization state. gamma/beta are the affine
/// transform, running_mean/running_var the exponentially averaged
/// statistics used in eval mode.
struct BatchNormLayer {
  std::size_t channels = 0;
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = kDefaultMomentum;
  double epsilon = kBatchNormEpsilon;

  BatchNormLayer() = default;
  explicit BatchNormLayer(std::size_t channels);

  /// Throws UsageError when any invariant is broken.
  void validate() const;

  friend bool operator==(const BatchNormLayer&, const BatchNormLayer&) = default;
};

/// adapt: normalize with the statistics of the current input.
/// eval: normalize with the layer's running statistics.
enum class BnMode { adapt, eval };

struct BatchNormResult {
  Var output;
  std::vector<double> batch_mean;
  std::vector<double> batch_var;  // population variance over (N,H,W)
};

/// Records a batch-norm op on the tape. gamma and beta are tape handles so
/// the caller decides whether they are trainable; running statistics are
/// read from `layer` and never modified here.
BatchNormResult batchnorm(Tape& tape, Var input, Var gamma, Var beta, const BatchNormLayer& layer, BnMode mode);

struct BatchNormForward {
  Tensor output;
  std::vector<double> batch_mean;
  std::vector<double> batch_var;
};

/// running <- (1-m)*running + m*batch, elementwise, for mean and variance.
void update_running_stats(BatchNormLayer& layer, std::span<const double> batch_mean,
                          std::span<const double> batch_var, double momentum);

/// Tape-free convenience form.
BatchNormForward batchnorm_forward(const BatchNormLayer& layer, const Tensor& input, BnMode mode);

}  // namespace wstta::nn
