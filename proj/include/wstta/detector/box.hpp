#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace wstta::detector {

/// Axis-aligned box in pixel coordinates, x2/y2 exclusive.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const noexcept { return x2 - x1; }
  double height() const noexcept { return y2 - y1; }
  double area() const noexcept { return width() > 0 && height() > 0 ? width() * height() : 0.0; }
  bool valid() const noexcept { return x1 < x2 && y1 < y2; }

  friend bool operator==(const Box&, const Box&) = default;
};

/// Intersection over union; 0 for disjoint or degenerate boxes.
double iou(const Box& a, const Box& b) noexcept;

Box clip(const Box& b, double width, double height) noexcept;

/// Greedy non-maximum suppression. Boxes are visited by descending score
/// (ties by lower index) and a box is dropped when its IoU with an already
/// kept box exceeds `iou_threshold`. Returns kept indices in visit order,
/// stopping after `max_keep` survivors (0 = unlimited).
std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const double> scores, double iou_threshold,
                             std::size_t max_keep = 0);

/// A detection: box, category index into the category list, score in [0,1].
struct Detection {
  Box box;
  std::size_t category = 0;
  double score = 0.0;

  friend bool operator==(const Detection&, const Detection&) = default;
};

using Prediction = std::vector<Detection>;

/// A labelled object (ground truth or pseudo-label entry).
struct LabeledBox {
  Box box;
  std::size_t category = 0;

  friend bool operator==(const LabeledBox&, const LabeledBox&) = default;
};

}  // namespace wstta::detector
