#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "hcount/dataset.hpp"
#include "hcount/geometry.hpp"
#include "hcount/network.hpp"

namespace hcount {

struct AnchorConfig {
  double stride = 8;
  std::vector<double> scales{12, 20, 32};
  std::vector<double> aspect_ratios{0.5, 1, 2};  // width / height

  std::size_t per_cell() const { return scales.size() * aspect_ratios.size(); }
  friend bool operator==(const AnchorConfig&, const AnchorConfig&) = default;
};

/// Anchors for a square image, ordered by cell row, cell column, scale, ratio.
/// Centres sit at (i + 0.5) * stride; boxes are clipped to the image.
std::vector<BBox> generate_anchors(const AnchorConfig& cfg, std::size_t image_size);

struct RpnConfig {
  AnchorConfig anchors;
  std::size_t image_size = 64;
  double positive_iou = 0.7;
  double negative_iou = 0.3;
  /// Also mark the best anchor of each ground truth positive, so small objects
  /// get at least one positive anchor.
  bool match_best_anchor = true;
  std::size_t anchors_per_image = 64;
  std::size_t max_positive = 32;
  double regression_weight = 10.0;
  double nms_iou = 0.7;
  friend bool operator==(const RpnConfig&, const RpnConfig&) = default;
};

/// Backbone and head as one network; layers [0, backbone_layers) produce the
/// shared feature map used for RoI pooling. The head emits, per cell and
/// anchor a, two objectness logits (background, object) in channels 2a, 2a+1
/// and four offsets in channels 2A + 4a ... 2A + 4a + 3.
struct Rpn {
  Network net;
  std::size_t backbone_layers = 0;
  AnchorConfig anchors;
  std::size_t image_size = 64;

  Shape feature_shape() const;
  /// Feature-map cells per image pixel.
  double spatial_scale() const;
  std::uint64_t memory_bytes() const { return param_memory(net.spec()); }
  std::uint64_t operations() const { return flop_count(net.spec()); }
};

NetworkSpec default_rpn_spec(std::size_t image_size, std::size_t anchors_per_cell, std::size_t* backbone_layers);
Rpn make_rpn(const RpnConfig& cfg, std::uint64_t seed);

/// Anchor training labels: 1 positive, 0 negative, -1 ignored. `matched` is
/// the ground-truth index with the highest IoU (-1 when there is none).
struct AnchorLabels {
  std::vector<int> labels;
  std::vector<int> matched;
};
AnchorLabels label_anchors(const std::vector<BBox>& anchors, const std::vector<Annotation>& truths,
                           const RpnConfig& cfg);

using Offsets = Box4;  // (tx, ty, tw, th)
Offsets encode_box(const BBox& anchor, const BBox& target);
BBox decode_box(const BBox& anchor, const Offsets& offsets);

struct RpnTrainReport {
  std::vector<double> epoch_loss;
  bool objectness_only = false;
};

/// The shared schedule with a larger initial step: plain SGD at 0.004
/// underfits the proposal head at this scale.
inline TrainConfig default_rpn_train_config() {
  TrainConfig cfg;
  cfg.initial_lr = 0.1;
  return cfg;
}

/// Trains with sampled-anchor cross-entropy plus smooth L1 on positive anchors.
/// Throws DivergenceError on a non-finite loss.
Rpn train_rpn(const DatasetManifest& data, const TrainConfig& train, const RpnConfig& cfg, std::uint64_t seed,
              RpnTrainReport* report = nullptr);

struct RoI {
  BBox box;
  double objectness = 0;
};

struct RpnPass {
  Tensor features;  // C x h x w
  Tensor head;      // 6A x gh x gw
};
RpnPass run_rpn(const Rpn& rpn, const Tensor& image);

/// Decoded, clipped boxes sorted by objectness (ties: lower anchor index),
/// class-agnostic NMS, at most k survivors.
std::vector<RoI> decode_proposals(const Rpn& rpn, const Tensor& head, std::size_t k, double nms_iou = 0.7);
std::vector<RoI> propose(const Rpn& rpn, const ImageSample& image, std::size_t k, double nms_iou = 0.7);

/// Fraction of ground-truth boxes matched by a proposal at IoU >= iou_threshold.
double proposal_recall(const Rpn& rpn, const DatasetManifest& data, std::size_t k, double iou_threshold = 0.5);

/// Max-pools the part of `feature_map` (C x h x w) under `roi` (image pixels)
/// into C x P x P. Cells narrower than one feature cell read the covering cell.
Tensor roi_pool(const Tensor& feature_map, const BBox& roi, std::size_t pool, double spatial_scale);

void save_rpn(const std::filesystem::path& path, const Rpn& rpn);
Rpn load_rpn(const std::filesystem::path& path);

}  // namespace hcount
