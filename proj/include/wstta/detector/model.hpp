#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wstta/detector/box.hpp"
#include "wstta/nn/batch_norm.hpp"
#include "wstta/nn/tensor.hpp"

namespace wstta::detector {

struct BackboneStage {
  std::size_t channels = 0;
  bool pool = false;  // 2x2 max pool after conv+BN+ReLU

  friend bool operator==(const BackboneStage&, const BackboneStage&) = default;
};

/// Shape of the mini detector. The default is the 64x64 reference network;
/// micro() is a two-stage toy used for gradient checks.
struct Architecture {
  std::size_t image_size = 64;
  std::vector<BackboneStage> stages{{16, true}, {32, true}, {64, false}};
  std::vector<double> anchor_sizes{12.0, 24.0};
  std::size_t proposals = 64;
  double proposal_nms_iou = 0.7;
  std::size_t roi_grid = 4;
  std::size_t hidden = 256;

  static Architecture reference() { return {}; }
  static Architecture micro();

  std::size_t stride() const;
  std::size_t grid() const { return image_size / stride(); }
  std::size_t feature_channels() const { return stages.back().channels; }
  std::size_t anchors_per_cell() const { return anchor_sizes.size(); }
  std::size_t anchor_count() const { return grid() * grid() * anchors_per_cell(); }
  std::size_t roi_features() const { return feature_channels() * roi_grid * roi_grid; }

  void validate() const;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct ConvParams {
  nn::Tensor weight;  // [F,C,k,k]
  nn::Tensor bias;    // [F]
  friend bool operator==(const ConvParams&, const ConvParams&) = default;
};

struct DenseParams {
  nn::Tensor weight;  // [out,in]
  nn::Tensor bias;    // [out]
  friend bool operator==(const DenseParams&, const DenseParams&) = default;
};

struct StageParams {
  ConvParams conv;
  nn::BatchNormLayer bn;
  friend bool operator==(const StageParams&, const StageParams&) = default;
};

/// What a parameter slot holds; used by audits that must tell BN state
/// apart from ordinary weights.
enum class SlotKind { weight, bias, bn_gamma, bn_beta, bn_running_mean, bn_running_var };

struct SlotRef {
  std::string name;
  SlotKind kind;
  nn::Tensor* tensor;
};

struct ConstSlotRef {
  std::string name;
  SlotKind kind;
  const nn::Tensor* tensor;
};

/// The two-stage detector: backbone with BN, proposal head over an anchor
/// grid, ROI classification head with L+1 outputs (last = background).
struct DetectorModel {
  std::vector<std::string> categories;
  Architecture arch;
  std::vector<StageParams> backbone;
  ConvParams objectness;  // 1x1, one logit per anchor size
  ConvParams box_deltas;  // 1x1, four deltas per anchor size
  DenseParams fc1;
  DenseParams fc2;

  std::size_t num_classes() const noexcept { return categories.size(); }
  std::size_t background() const noexcept { return categories.size(); }

  std::vector<SlotRef> slots();
  std::vector<ConstSlotRef> slots() const;

  friend bool operator==(const DetectorModel&, const DetectorModel&) = default;
};

/// Deterministic He-uniform initialisation; BN at gamma=1, beta=0,
/// running stats (0,1), momentum 0.1.
DetectorModel build_model(std::uint64_t seed, std::vector<std::string> categories,
                          Architecture arch = Architecture::reference());

/// FNV-1a over the raw bytes of one tensor.
std::uint64_t tensor_digest(const nn::Tensor& t);

/// Slot name -> digest for every parameter and running statistic.
std::vector<std::pair<std::string, std::uint64_t>> parameter_digest(const DetectorModel& model);

}  // namespace wstta::detector
