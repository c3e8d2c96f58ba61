#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "wstta/adapt/labels.hpp"
#include "wstta/detector/box.hpp"
#include "wstta/nn/tape.hpp"
#include "wstta/nn/tensor.hpp"
#include "wstta/util/rng.hpp"

namespace wstta::adapt {

inline constexpr double kProbabilityClamp = 1e-7;
inline constexpr std::size_t kInstanceAnchorSamples = 32;

/// Column of the largest entry in each row; ties go to the smallest column.
std::vector<std::size_t> row_argmax(const nn::Tensor& class_scores);

/// K x L matrix with objectness[k] at (k, argmax_l C[k,l]) and zero elsewhere.
nn::Tensor build_O(const nn::Tensor& class_scores, std::span<const double> objectness);

/// z_l = sum_k softmax_rows(C)[k,l] * softmax_cols(O)[k,l].
/// class_scores: [K,L] foreground logits, objectness: [K] logits.
nn::Var image_level_prediction(nn::Tape& tape, nn::Var class_scores, nn::Var objectness);
std::vector<double> image_level_prediction(const nn::Tensor& class_scores, std::span<const double> objectness);

/// Mean per-class binary cross-entropy with probabilities clamped to
/// [1e-7, 1-1e-7].
nn::Var image_level_loss(nn::Tape& tape, nn::Var zhat, std::span<const double> target);
double image_level_loss(std::span<const double> zhat, std::span<const double> target);

struct InstanceLoss {
  nn::Var total;  // rpn + roi
  nn::Var rpn;
  nn::Var roi;
  std::vector<std::size_t> sampled_anchors;
  std::vector<int> roi_labels;  // per proposal; L means background
};

/// RPN objectness BCE over at most 32 sampled anchors (at most half
/// positive) assigned against the pseudo boxes, plus (L+1)-way CE over
/// every proposal: class of the best pseudo box at IoU >= 0.5, else
/// background. No box regression.
InstanceLoss instance_level_loss(nn::Tape& tape, nn::Var anchor_objectness, nn::Var class_logits,
                                 std::span<const detector::Box> anchors,
                                 std::span<const detector::Box> proposal_boxes, const PseudoLabel& pseudo, Rng& rng);

inline double total_loss(double l_ins, double l_img, double alpha) { return l_ins + alpha * l_img; }

}  // namespace wstta::adapt
