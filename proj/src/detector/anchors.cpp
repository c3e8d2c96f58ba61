#include "wstta/detector/anchors.hpp"

#include <algorithm>
#include <cmath>

namespace wstta::detector {

namespace {
constexpr double kMaxLogScale = 3.0;
}

std::vector<Box> make_anchors(std::size_t grid, double stride, std::span<const double> sizes) {
  std::vector<Box> anchors;
  anchors.reserve(grid * grid * sizes.size());
  for (double s : sizes) {
    for (std::size_t y = 0; y < grid; ++y) {
      for (std::size_t x = 0; x < grid; ++x) {
        const double cx = (static_cast<double>(x) + 0.5) * stride;
        const double cy = (static_cast<double>(y) + 0.5) * stride;
        anchors.push_back(Box{cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2});
      }
    }
  }
  return anchors;
}

std::vector<AnchorMatch> assign_anchors(std::span<const Box> anchors, std::span<const Box> targets) {
  std::vector<AnchorMatch> out(anchors.size());
  if (targets.empty()) return out;

  std::vector<double> best_for_target(targets.size(), 0.0);
  std::vector<double> best_iou(anchors.size(), 0.0);
  std::vector<std::size_t> best_target(anchors.size(), 0);
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    for (std::size_t t = 0; t < targets.size(); ++t) {
      const double v = iou(anchors[a], targets[t]);
      if (v > best_iou[a]) {
        best_iou[a] = v;
        best_target[a] = t;
      }
      best_for_target[t] = std::max(best_for_target[t], v);
    }
  }
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    if (best_iou[a] >= kPositiveIou) {
      out[a] = {AnchorLabel::positive, best_target[a]};
    } else if (best_iou[a] < kNegativeIou) {
      out[a] = {AnchorLabel::negative, 0};
    } else {
      out[a] = {AnchorLabel::ignore, 0};
    }
  }
  // every target keeps its best anchors, even below the positive threshold
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (best_for_target[t] <= 0.0) continue;
    for (std::size_t a = 0; a < anchors.size(); ++a) {
      if (iou(anchors[a], targets[t]) == best_for_target[t] && out[a].label != AnchorLabel::positive) {
        out[a] = {AnchorLabel::positive, t};
      }
    }
  }
  return out;
}

std::array<double, 4> encode_deltas(const Box& anchor, const Box& target) {
  const double aw = anchor.width(), ah = anchor.height();
  const double acx = anchor.x1 + aw / 2, acy = anchor.y1 + ah / 2;
  const double tw = target.width(), th = target.height();
  const double tcx = target.x1 + tw / 2, tcy = target.y1 + th / 2;
  return {(tcx - acx) / aw, (tcy - acy) / ah, std::log(tw / aw), std::log(th / ah)};
}

Box decode_deltas(const Box& anchor, std::span<const double, 4> d) {
  const double aw = anchor.width(), ah = anchor.height();
  const double cx = anchor.x1 + aw / 2 + d[0] * aw;
  const double cy = anchor.y1 + ah / 2 + d[1] * ah;
  const double w = aw * std::exp(std::clamp(d[2], -kMaxLogScale, kMaxLogScale));
  const double h = ah * std::exp(std::clamp(d[3], -kMaxLogScale, kMaxLogScale));
  return Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

}  // namespace wstta::detector
