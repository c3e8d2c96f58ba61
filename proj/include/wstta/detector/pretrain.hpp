#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "wstta/detector/box.hpp"
#include "wstta/detector/model.hpp"
#include "wstta/nn/tensor.hpp"

namespace wstta::detector {

struct TrainingSample {
  nn::Tensor image;  // [3,S,S]
  std::vector<LabeledBox> objects;
};

/// Toy-scale supervised recipe: Adam on RPN objectness BCE + smooth-L1 box
/// deltas + ROI (L+1)-way cross-entropy, with the learning rate dropped
/// by `lr_drop` for the final quarter of the run.
struct PretrainConfig {
  std::size_t steps = 2500;
  std::size_t batch_size = 4;
  double learning_rate = 2e-3;
  double lr_drop = 0.1;
  double lr_drop_at = 0.75;  // fraction of steps
  std::uint64_t seed = 0;
  std::size_t rpn_batch = 64;       // sampled anchors per image
  std::size_t roi_batch = 32;       // sampled ROIs per image
  double roi_fg_fraction = 0.5;
  double box_loss_weight = 1.0;
};

struct PretrainResult {
  DetectorModel model;
  std::vector<double> loss_curve;  // total loss per step
};

using PretrainProgress = std::function<void(std::size_t step, double loss)>;

/// Trains every parameter; BN uses batch statistics and updates running
/// statistics with the layer momentum. Deterministic given config.seed.
PretrainResult pretrain(DetectorModel model, std::span<const TrainingSample> data, const PretrainConfig& config,
                        const PretrainProgress& progress = {});

}  // namespace wstta::detector
