#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "wstta/detector/box.hpp"

namespace wstta::eval {

inline constexpr double kMatchIou = 0.5;

/// Greedy matching within one image and one category. `dets` are visited
/// by descending score (ties: lower index first); each takes the
/// highest-IoU still-unmatched ground truth with IoU >= threshold.
/// Returns, per detection in input order, the matched gt index or -1.
std::vector<int> match_detections(std::span<const detector::Box> det_boxes, std::span<const double> det_scores,
                                  std::span<const detector::Box> gt_boxes, double iou_threshold = kMatchIou);

/// All-point interpolated AP of a ranked TP/FP list. nullopt when num_gt == 0.
std::optional<double> average_precision(const std::vector<bool>& ranked_tp, std::size_t num_gt);

struct FrameResult {
  std::uint64_t frame_id = 0;
  detector::Prediction prediction;
  std::vector<detector::LabeledBox> ground_truth;
};

struct CategoryResult {
  std::size_t num_gt = 0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::optional<double> ap50;  // empty when the category has no ground truth
};

struct EvalResult {
  std::vector<CategoryResult> per_category;
  double map50 = 0.0;  // mean over categories with ground truth
};

EvalResult map50(std::span<const FrameResult> frames, std::size_t num_categories);

}  // namespace wstta::eval
