#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "wstta/detector/box.hpp"

namespace wstta::detector {

inline constexpr double kPositiveIou = 0.5;
inline constexpr double kNegativeIou = 0.3;

/// Square anchors centred on every cell of a grid. Anchor index is
/// (size_index * grid + y) * grid + x, matching the objectness map layout.
std::vector<Box> make_anchors(std::size_t grid, double stride, std::span<const double> sizes);

enum class AnchorLabel { negative, positive, ignore };

struct AnchorMatch {
  AnchorLabel label = AnchorLabel::negative;
  std::size_t target = 0;  // valid when positive
};

/// Faster-RCNN style matching: positive when IoU >= 0.5 with some target
/// (assigned to the argmax target) or when the anchor is a best anchor of a
/// target; negative when max IoU < 0.3; ignore otherwise.
std::vector<AnchorMatch> assign_anchors(std::span<const Box> anchors, std::span<const Box> targets);

/// (dx, dy) relative to anchor size, (dw, dh) logarithmic.
std::array<double, 4> encode_deltas(const Box& anchor, const Box& target);
Box decode_deltas(const Box& anchor, std::span<const double, 4> deltas);

}  // namespace wstta::detector
