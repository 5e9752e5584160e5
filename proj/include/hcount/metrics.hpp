#pragma once

#include <cstddef>
#include <map>
#include <stdexcept>
#include <vector>

#include "hcount/dataset.hpp"
#include "hcount/geometry.hpp"

namespace hcount {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

double rmse(const std::vector<double>& predicted, const std::vector<double>& truth);

struct Detection {
  BBox box;
  double score = 0;
  int category = 0;
};

/// Pascal-style 11-point interpolated AP from detections already ranked by
/// score: hits[i] says whether the i-th ranked detection matched a truth.
double average_precision_11pt(const std::vector<bool>& hits, std::size_t truth_count);

/// Per category: detections of all images ranked by score (ties keep image,
/// then list order); each is a hit if its highest-IoU truth of that category
/// in the same image has IoU >= iou_threshold and is still unmatched. Mean of
/// the 11-point AP over categories that have truths. Throws MetricError when
/// there are no truths at all.
double mean_average_precision(const std::vector<std::vector<Detection>>& detections,
                              const std::vector<std::vector<Annotation>>& truths, double iou_threshold = 0.5);

/// Mean reported count divided by n for every true count n >= 1 that occurs.
std::map<std::size_t, double> normalized_count_ratio(const std::vector<std::size_t>& true_counts,
                                                     const std::vector<std::size_t>& reported_counts);

/// 1 - ours / baseline.
inline double reduction(double ours, double baseline) { return 1.0 - ours / baseline; }

}  // namespace hcount
