#include "wstta/detector/box.hpp"

#include <algorithm>
#include <numeric>

namespace wstta::detector {

double iou(const Box& a, const Box& b) noexcept {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

Box clip(const Box& b, double width, double height) noexcept {
  return Box{std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height), std::clamp(b.x2, 0.0, width),
             std::clamp(b.y2, 0.0, height)};
}

std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const double> scores, double iou_threshold,
                             std::size_t max_keep) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> kept;
  for (std::size_t i : order) {
    bool suppressed = false;
    for (std::size_t k : kept) {
      if (iou(boxes[i], boxes[k]) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (suppressed) continue;
    kept.push_back(i);
    if (max_keep && kept.size() == max_keep) break;
  }
  return kept;
}

}  // namespace wstta::detector
