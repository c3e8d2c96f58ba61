#pragma once

#include <array>
#include <memory>
#include <span>
#include <vector>

#include "wstta/detector/box.hpp"
#include "wstta/detector/model.hpp"
#include "wstta/nn/batch_norm.hpp"
#include "wstta/nn/tape.hpp"

namespace wstta::detector {

/// Which parameter slots become trainable tape leaves.
enum class Trainable { none, bn_affine, all };

struct BnBatchStats {
  std::vector<double> mean;
  std::vector<double> var;
};

struct RoiRef {
  std::size_t image = 0;
  Box box;
};

/// Records the detector's forward pass on a tape it owns. Parameter leaves
/// carry the model's slot names so gradients come back keyed by slot.
class DetectorGraph {
 public:
  DetectorGraph(const DetectorModel& model, nn::BnMode mode, Trainable trainable);

  nn::Tape& tape() noexcept { return tape_; }
  const nn::Tape& tape() const noexcept { return tape_; }
  const DetectorModel& model() const noexcept { return model_; }
  const std::vector<Box>& anchors() const noexcept { return anchors_; }

  struct Backbone {
    nn::Var features;  // [N,C,G,G]
    std::vector<BnBatchStats> stats;
  };
  /// images: [N,3,S,S] with values in [0,1].
  Backbone backbone(const nn::Tensor& images);

  struct Rpn {
    nn::Var objectness;  // [N,A,G,G]
    nn::Var deltas;      // [N,4A,G,G]
  };
  Rpn rpn(nn::Var features);

  /// Objectness logits of every anchor of one image, flat in anchor order.
  nn::Var anchor_objectness(const Rpn& rpn, std::size_t image);
  /// Logits of the given anchors of one image, [indices.size()].
  nn::Var gather_objectness(const Rpn& rpn, std::size_t image, std::span<const std::size_t> anchor_indices);
  /// Decoded, clipped box for every anchor of one image.
  std::vector<Box> decode_boxes(const Rpn& rpn, std::size_t image) const;
  /// Raw deltas [anchor][4] of one image.
  std::vector<std::array<double, 4>> anchor_deltas(const Rpn& rpn, std::size_t image) const;

  struct Proposals {
    std::vector<std::size_t> anchor_index;
    std::vector<Box> boxes;
  };
  /// Top proposals by objectness after class-agnostic NMS.
  Proposals select_proposals(const Rpn& rpn, std::size_t image) const;

  /// Nearest-neighbour ROI pooling + the two dense layers: [R, L+1].
  nn::Var roi_logits(nn::Var features, std::span<const RoiRef> rois);

 private:
  nn::Var param(const std::string& name, const nn::Tensor& value, bool trainable);

  const DetectorModel& model_;
  nn::BnMode mode_;
  nn::Tape tape_;
  std::vector<Box> anchors_;
  struct StageVars {
    nn::Var weight, bias, gamma, beta;
  };
  std::vector<StageVars> stage_vars_;
  nn::Var obj_w_, obj_b_, delta_w_, delta_b_, fc1_w_, fc1_b_, fc2_w_, fc2_b_;
};

/// Detector outputs for one image.
struct RawOutputs {
  std::vector<double> proposal_logits;       // o, one per selected proposal
  std::vector<Box> proposal_boxes;           // K' boxes
  std::vector<std::size_t> proposal_anchors; // anchor index per proposal
  nn::Tensor class_logits;                   // [K', L+1], last column background
  nn::Tensor anchor_objectness;              // [anchor_count]
  nn::Tensor anchor_deltas;                  // [anchor_count, 4]

  friend bool operator==(const RawOutputs&, const RawOutputs&) = default;
};

/// Forward pass kept on its tape, for losses and backward.
struct TracedOutputs {
  std::unique_ptr<DetectorGraph> graph;
  RawOutputs raw;
  nn::Var anchor_objectness;    // [anchor_count]
  nn::Var proposal_objectness;  // [K']
  nn::Var class_logits;         // [K', L+1]
  std::vector<BnBatchStats> bn_stats;
};

/// Accepts [1,3,S,S] or [3,S,S].
TracedOutputs trace_forward(const DetectorModel& model, const nn::Tensor& image, nn::BnMode mode,
                            Trainable trainable);

/// Untraced forward. Eval mode never touches model state.
RawOutputs forward_full(const DetectorModel& model, const nn::Tensor& image, nn::BnMode mode);

inline constexpr double kEvalScoreThreshold = 0.05;
inline constexpr double kEvalNmsIou = 0.5;

/// Softmax per proposal, per-category thresholding and NMS. Output sorted
/// by descending score.
Prediction postprocess(const RawOutputs& raw, double score_threshold, double nms_iou);

/// Eval-mode forward + postprocess.
Prediction predict(const DetectorModel& model, const nn::Tensor& image,
                   double score_threshold = kEvalScoreThreshold, double nms_iou = kEvalNmsIou);

}  // namespace wstta::detector
