#include "hcount/geometry.hpp"

#include <algorithm>
#include <numeric>

namespace hcount {

double intersection_area(const BBox& a, const BBox& b) {
  const double w = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double h = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  return w > 0 && h > 0 ? w * h : 0.0;
}

double iou(const BBox& a, const BBox& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0) return 0.0;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? std::min(1.0, inter / uni) : 0.0;
}

BBox clip(const BBox& box, double width, double height) {
  return {std::clamp(box.x_min, 0.0, width), std::clamp(box.y_min, 0.0, height),
          std::clamp(box.x_max, 0.0, width), std::clamp(box.y_max, 0.0, height)};
}

std::vector<std::size_t> nms(const std::vector<ScoredBox>& boxes, double iou_threshold) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return boxes[a].score > boxes[b].score;
  });
  std::vector<bool> suppressed(boxes.size(), false);
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t cur = order[i];
    if (suppressed[cur]) continue;
    kept.push_back(cur);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const std::size_t other = order[j];
      if (!suppressed[other] && iou(boxes[cur].box, boxes[other].box) >= iou_threshold) {
        suppressed[other] = true;
      }
    }
  }
  return kept;
}

}  // namespace hcount
