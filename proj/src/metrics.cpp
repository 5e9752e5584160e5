#include "hcount/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace hcount {

double rmse(const std::vector<double>& predicted, const std::vector<double>& truth) {
  if (predicted.empty()) throw MetricError("rmse of an empty sequence");
  if (predicted.size() != truth.size()) throw MetricError("rmse needs equal-length sequences");
  double sum = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) sum += (predicted[i] - truth[i]) * (predicted[i] - truth[i]);
  return std::sqrt(sum / static_cast<double>(predicted.size()));
}

double average_precision_11pt(const std::vector<bool>& hits, std::size_t truth_count) {
  if (truth_count == 0) return 0.0;
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < hits.size(); ++i) {
    tp += hits[i];
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(truth_count));
  }
  // Running max from the tail gives the interpolated precision.
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0;
  for (int step = 0; step <= 10; ++step) {
    const double level = step / 10.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), level - 1e-12);
    if (it != recall.end()) ap += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return ap / 11.0;
}

double mean_average_precision(const std::vector<std::vector<Detection>>& detections,
                              const std::vector<std::vector<Annotation>>& truths, double iou_threshold) {
  if (detections.size() != truths.size()) throw MetricError("detections and truths cover different image counts");
  std::set<int> categories;
  for (const auto& img : truths)
    for (const auto& t : img) categories.insert(t.category);
  if (categories.empty()) throw MetricError("mAP needs at least one ground truth");

  double total = 0;
  for (int cat : categories) {
    struct Ranked {
      double score;
      std::size_t image, index;
    };
    std::vector<Ranked> ranked;
    std::size_t truth_count = 0;
    for (std::size_t i = 0; i < detections.size(); ++i) {
      for (std::size_t d = 0; d < detections[i].size(); ++d)
        if (detections[i][d].category == cat) ranked.push_back({detections[i][d].score, i, d});
      for (const auto& t : truths[i]) truth_count += t.category == cat;
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });
    std::vector<std::vector<bool>> used(truths.size());
    for (std::size_t i = 0; i < truths.size(); ++i) used[i].assign(truths[i].size(), false);
    std::vector<bool> hits;
    for (const auto& r : ranked) {
      const BBox& box = detections[r.image][r.index].box;
      double best = -1;
      std::size_t best_t = 0;
      for (std::size_t t = 0; t < truths[r.image].size(); ++t) {
        if (truths[r.image][t].category != cat) continue;
        const double o = iou(box, truths[r.image][t].box);
        if (o > best) {
          best = o;
          best_t = t;
        }
      }
      const bool hit = best >= iou_threshold && !used[r.image][best_t];
      if (hit) used[r.image][best_t] = true;
      hits.push_back(hit);
    }
    total += average_precision_11pt(hits, truth_count);
  }
  return total / static_cast<double>(categories.size());
}

std::map<std::size_t, double> normalized_count_ratio(const std::vector<std::size_t>& true_counts,
                                                     const std::vector<std::size_t>& reported_counts) {
  if (true_counts.size() != reported_counts.size()) throw MetricError("count sequences differ in length");
  std::map<std::size_t, std::pair<double, std::size_t>> sums;
  for (std::size_t i = 0; i < true_counts.size(); ++i) {
    if (true_counts[i] == 0) continue;
    auto& s = sums[true_counts[i]];
    s.first += static_cast<double>(reported_counts[i]);
    ++s.second;
  }
  std::map<std::size_t, double> out;
  for (const auto& [n, s] : sums) out[n] = s.first / static_cast<double>(s.second) / static_cast<double>(n);
  return out;
}

}  // namespace hcount
