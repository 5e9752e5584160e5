#pragma once

// Brute-force reference implementations used as test oracles. They avoid the
// library code they check.

#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

#include <doctest.h>

#include "hcount/dataset.hpp"
#include "hcount/geometry.hpp"
#include "hcount/rng.hpp"

namespace hcount::oracle {

inline bool box_near(const BBox& a, const BBox& b, double tol) {
  return std::abs(a.x_min - b.x_min) <= tol && std::abs(a.y_min - b.y_min) <= tol &&
         std::abs(a.x_max - b.x_max) <= tol && std::abs(a.y_max - b.y_max) <= tol;
}

inline BBox random_int_box(Rng& rng, int extent) {
  const auto x0 = static_cast<double>(rng.below(static_cast<std::uint64_t>(extent)));
  const auto y0 = static_cast<double>(rng.below(static_cast<std::uint64_t>(extent)));
  const auto w = static_cast<double>(1 + rng.below(static_cast<std::uint64_t>(extent / 2)));
  const auto h = static_cast<double>(1 + rng.below(static_cast<std::uint64_t>(extent / 2)));
  return {x0, y0, x0 + w, y0 + h};
}

inline BBox random_box(Rng& rng, double extent) {
  const double x0 = rng.uniform(0, extent), y0 = rng.uniform(0, extent);
  return {x0, y0, x0 + rng.uniform(0.5, extent / 2), y0 + rng.uniform(0.5, extent / 2)};
}

// IoU by counting unit cells of integer-aligned boxes.
inline double pixel_iou(const BBox& a, const BBox& b) {
  const int lo_x = static_cast<int>(std::min(a.x_min, b.x_min)), hi_x = static_cast<int>(std::max(a.x_max, b.x_max));
  const int lo_y = static_cast<int>(std::min(a.y_min, b.y_min)), hi_y = static_cast<int>(std::max(a.y_max, b.y_max));
  long inter = 0, uni = 0;
  for (int y = lo_y; y < hi_y; ++y) {
    for (int x = lo_x; x < hi_x; ++x) {
      const bool in_a = x >= a.x_min && x < a.x_max && y >= a.y_min && y < a.y_max;
      const bool in_b = x >= b.x_min && x < b.x_max && y >= b.y_min && y < b.y_max;
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline std::vector<int> label_rois_brute(const std::vector<BBox>& rois, const std::vector<Annotation>& gt,
                                         double threshold) {
  std::vector<int> out;
  for (const auto& r : rois) {
    std::vector<double> scores;
    for (const auto& g : gt) scores.push_back(pixel_iou(r, g.box));
    int label = kBackground;
    if (!scores.empty()) {
      const auto best = std::max_element(scores.begin(), scores.end());  // first maximum
      if (*best >= threshold) label = gt[static_cast<std::size_t>(best - scores.begin())].category;
    }
    out.push_back(label);
  }
  return out;
}

// Greedy NMS by repeated linear scans for the best remaining box.
inline std::vector<std::size_t> nms_naive(const std::vector<ScoredBox>& boxes, double thr) {
  std::vector<bool> alive(boxes.size(), true);
  std::vector<std::size_t> kept;
  for (;;) {
    std::size_t best = boxes.size();
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      if (alive[i] && (best == boxes.size() || boxes[i].score > boxes[best].score)) best = i;
    }
    if (best == boxes.size()) break;
    kept.push_back(best);
    alive[best] = false;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      if (alive[i] && pixel_iou(boxes[best].box, boxes[i].box) >= thr) alive[i] = false;
    }
  }
  return kept;
}

// Anchor labels by the plain threshold rule: 1 at IoU >= pos, 0 below neg,
// -1 between.
inline std::vector<int> anchor_labels_brute(const std::vector<BBox>& anchors, const std::vector<Annotation>& gt,
                                            double pos, double neg) {
  std::vector<int> out;
  for (const auto& a : anchors) {
    double best = 0;
    for (const auto& g : gt) best = std::max(best, pixel_iou(a, g.box));
    out.push_back(best >= pos ? 1 : best < neg ? 0 : -1);
  }
  return out;
}

// 11-point AP by enumerating every prefix of the ranking and scanning for the
// best precision at each recall level, using integer recall comparisons.
inline double ap_staircase(const std::vector<bool>& hits, std::size_t truths) {
  if (truths == 0) return 0.0;
  double total = 0;
  for (std::size_t level = 0; level <= 10; ++level) {
    double best = 0;
    for (std::size_t k = 1; k <= hits.size(); ++k) {
      std::size_t tp = 0;
      for (std::size_t i = 0; i < k; ++i) tp += hits[i];
      if (tp * 10 >= level * truths) best = std::max(best, static_cast<double>(tp) / static_cast<double>(k));
    }
    total += best;
  }
  return total / 11.0;
}

struct OracleDetection {
  BBox box;
  double score;
  int category;
};

inline double map_brute(const std::vector<std::vector<OracleDetection>>& dets,
                        const std::vector<std::vector<Annotation>>& truths, double thr) {
  std::vector<int> cats;
  for (const auto& img : truths)
    for (const auto& t : img)
      if (std::find(cats.begin(), cats.end(), t.category) == cats.end()) cats.push_back(t.category);
  double total = 0;
  for (int cat : cats) {
    // Selection order: highest score, then lowest image, then lowest index.
    std::vector<std::pair<std::size_t, std::size_t>> pending;
    for (std::size_t i = 0; i < dets.size(); ++i)
      for (std::size_t d = 0; d < dets[i].size(); ++d)
        if (dets[i][d].category == cat) pending.push_back({i, d});
    std::vector<std::vector<bool>> used(truths.size());
    for (std::size_t i = 0; i < truths.size(); ++i) used[i].assign(truths[i].size(), false);
    std::vector<bool> hits;
    while (!pending.empty()) {
      std::size_t pick = 0;
      for (std::size_t j = 1; j < pending.size(); ++j) {
        const auto& a = dets[pending[j].first][pending[j].second];
        const auto& b = dets[pending[pick].first][pending[pick].second];
        if (a.score > b.score) pick = j;
      }
      const auto [img, idx] = pending[pick];
      pending.erase(pending.begin() + static_cast<std::ptrdiff_t>(pick));
      double best = -1;
      std::size_t best_t = 0;
      for (std::size_t t = 0; t < truths[img].size(); ++t) {
        if (truths[img][t].category != cat) continue;
        const double o = pixel_iou(dets[img][idx].box, truths[img][t].box);
        if (o > best) {
          best = o;
          best_t = t;
        }
      }
      const bool hit = best >= thr && !used[img][best_t];
      if (hit) used[img][best_t] = true;
      hits.push_back(hit);
    }
    std::size_t n = 0;
    for (const auto& img : truths)
      for (const auto& t : img) n += t.category == cat;
    total += ap_staircase(hits, n);
  }
  return total / static_cast<double>(cats.size());
}

// Depth-loop hand simulation: the first depth whose step to the next one
// gains no more than the threshold per MB, otherwise the cap. map[d - 1] and
// memory[d - 1] describe depth d.
inline std::size_t depth_loop_simulation(const std::vector<double>& map, const std::vector<double>& memory,
                                         double threshold, std::size_t max_depth) {
  for (std::size_t d = 1; d < max_depth; ++d) {
    const double gain = (map[d] - map[d - 1]) / (memory[d] - memory[d - 1]);
    if (!(gain > threshold)) return d;
  }
  return max_depth;
}

}  // namespace hcount::oracle

namespace doctest {
template <>
struct StringMaker<hcount::BBox> {
  static String convert(const hcount::BBox& b) {
    std::ostringstream os;
    os << "(" << b.x_min << ", " << b.y_min << ", " << b.x_max << ", " << b.y_max << ")";
    return os.str().c_str();
  }
};
}  // namespace doctest
