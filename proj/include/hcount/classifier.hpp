#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "hcount/dataset.hpp"
#include "hcount/network.hpp"
#include "hcount/proposals.hpp"

namespace hcount {

/// Hierarchy node: `depth` x (conv3-width, relu), a 2x2 max pool when the map
/// is at least 4 wide, then linear + softmax. width 0 means "input channels".
NetworkSpec node_spec(const Shape& input, std::size_t depth, std::size_t classes, std::size_t width = 0);

/// Baseline classifier over every category plus background: three conv3
/// layers at twice the input width, pool, a 128-unit hidden layer.
NetworkSpec flat_spec(const Shape& input, std::size_t classes);

/// Pooled RoI features with their labels and provenance.
struct RoiSet {
  Shape shape;  // per-RoI feature shape
  std::vector<float> features;
  std::vector<int> labels;  // category or kBackground
  std::vector<std::uint32_t> image;
  std::vector<BBox> boxes;

  std::size_t size() const { return labels.size(); }
  std::size_t volume() const { return shape_volume(shape); }
  std::span<const float> feature(std::size_t i) const { return {features.data() + i * volume(), volume()}; }
  void push(std::span<const float> f, int label, std::uint32_t image_index, const BBox& box);
  RoiSet select(const std::vector<std::size_t>& indices) const;
  /// Indices of RoIs whose image index is in `images` (a sorted list).
  std::vector<std::size_t> from_images(const std::vector<std::size_t>& images) const;
};

struct RoiSampling {
  std::size_t proposals = 64;
  double rpn_nms_iou = 0.7;
  std::size_t pool = 7;
  /// Per image: ground-truth boxes first, then sampled positive proposals up
  /// to max_positive in total, then up to max_background background RoIs.
  std::size_t max_positive = 8;
  std::size_t max_background = 6;
};

/// Labeled training RoIs from RPN proposals and ground truths (IoU 0.7 rule).
RoiSet collect_training_rois(const Rpn& rpn, const DatasetManifest& data, const RoiSampling& cfg, std::uint64_t seed);
/// Every proposal of every image, labeled, for detection-level evaluation.
RoiSet collect_proposal_rois(const Rpn& rpn, const DatasetManifest& data, const RoiSampling& cfg);

/// Called after every epoch with the epoch index and the current network.
using EpochHook = std::function<void(std::size_t, const Network&)>;

/// Mini-batch SGD on cross-entropy. targets[i] < 0 skips RoI i. Throws
/// DivergenceError on a non-finite loss. Returns the mean loss per epoch.
std::vector<double> train_classifier(Network& net, const RoiSet& data, const std::vector<int>& targets,
                                     const TrainConfig& cfg, std::uint64_t seed, const EpochHook& hook = {});

struct NodeOutputs {
  Tensor probs;  // n x classes
  RoiSet trunk;  // same metadata, features = trunk output
};

/// Softmax outputs (n x classes) for the given RoIs (all when indices empty).
Tensor predict(const Network& net, const RoiSet& data, const std::vector<std::size_t>& indices = {});
/// Softmax outputs plus the trunk activations feeding the first linear layer.
NodeOutputs run_node(const Network& net, const RoiSet& data);

}  // namespace hcount
