#include "wstta/eval/metrics.hpp"

#include <algorithm>
#include <numeric>

#include "wstta/nn/tensor.hpp"

namespace wstta::eval {

using detector::Box;

std::vector<int> match_detections(std::span<const Box> det_boxes, std::span<const double> det_scores,
                                  std::span<const Box> gt_boxes, double iou_threshold) {
  if (det_boxes.size() != det_scores.size()) throw nn::UsageError("one score per detection required");
  std::vector<std::size_t> order(det_boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return det_scores[a] > det_scores[b]; });
  std::vector<int> out(det_boxes.size(), -1);
  std::vector<bool> taken(gt_boxes.size(), false);
  for (std::size_t d : order) {
    int best = -1;
    double best_iou = iou_threshold;
    for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
      if (taken[g]) continue;
      const double v = detector::iou(det_boxes[d], gt_boxes[g]);
      if (v >= best_iou && (best < 0 || v > best_iou)) {
        best = static_cast<int>(g);
        best_iou = v;
      }
    }
    if (best >= 0) {
      taken[static_cast<std::size_t>(best)] = true;
      out[d] = best;
    }
  }
  return out;
}

std::optional<double> average_precision(const std::vector<bool>& ranked_tp, std::size_t num_gt) {
  if (num_gt == 0) return std::nullopt;
  const std::size_t n = ranked_tp.size();
  std::vector<double> recall(n), precision(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (ranked_tp[i]) ++tp;
    recall[i] = static_cast<double>(tp) / static_cast<double>(num_gt);
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

EvalResult map50(std::span<const FrameResult> frames, std::size_t num_categories) {
  struct Ranked {
    double score;
    std::uint64_t frame_id;
    std::size_t index;
    bool tp;
  };
  std::vector<std::vector<Ranked>> ranked(num_categories);
  EvalResult result;
  result.per_category.resize(num_categories);

  for (const FrameResult& f : frames) {
    for (std::size_t c = 0; c < num_categories; ++c) {
      std::vector<Box> gts, dets;
      std::vector<double> scores;
      std::vector<std::size_t> det_index;
      for (const detector::LabeledBox& g : f.ground_truth) {
        if (g.category == c) gts.push_back(g.box);
      }
      for (std::size_t i = 0; i < f.prediction.size(); ++i) {
        if (f.prediction[i].category != c) continue;
        dets.push_back(f.prediction[i].box);
        scores.push_back(f.prediction[i].score);
        det_index.push_back(i);
      }
      result.per_category[c].num_gt += gts.size();
      const std::vector<int> m = match_detections(dets, scores, gts);
      for (std::size_t i = 0; i < dets.size(); ++i) ranked[c].push_back({scores[i], f.frame_id, det_index[i], m[i] >= 0});
    }
  }

  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < num_categories; ++c) {
    std::vector<Ranked>& r = ranked[c];
    std::sort(r.begin(), r.end(), [](const Ranked& a, const Ranked& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.frame_id != b.frame_id) return a.frame_id < b.frame_id;
      return a.index < b.index;
    });
    std::vector<bool> flags;
    CategoryResult& cr = result.per_category[c];
    for (const Ranked& x : r) {
      flags.push_back(x.tp);
      (x.tp ? cr.tp : cr.fp) += 1;
    }
    cr.fn = cr.num_gt - cr.tp;
    cr.ap50 = average_precision(flags, cr.num_gt);
    if (cr.ap50) {
      sum += *cr.ap50;
      ++counted;
    }
  }
  result.map50 = counted ? sum / static_cast<double>(counted) : 0.0;
  return result;
}

}  // namespace wstta::eval
