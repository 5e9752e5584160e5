#pragma once

#include <cstddef>
#include <vector>

namespace hcount {

/// Axis-aligned box in pixel coordinates; max edges are exclusive.
struct BBox {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() > 0 && height() > 0 ? width() * height() : 0.0; }
  bool valid() const { return x_min < x_max && y_min < y_max; }
  friend bool operator==(const BBox&, const BBox&) = default;
};

double intersection_area(const BBox& a, const BBox& b);
/// Intersection over union; 0 for disjoint or degenerate boxes.
double iou(const BBox& a, const BBox& b);
BBox clip(const BBox& box, double width, double height);

struct ScoredBox {
  BBox box;
  double score = 0;
};

/// Greedy non-maximum suppression. Visits boxes by descending score (ties:
/// lower index first), keeps each box not yet suppressed and suppresses every
/// later box whose IoU with it is >= iou_threshold. Returns kept indices in
/// visiting order.
std::vector<std::size_t> nms(const std::vector<ScoredBox>& boxes, double iou_threshold);

}  // namespace hcount
