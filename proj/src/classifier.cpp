#include "hcount/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hcount/rng.hpp"

namespace hcount {

NetworkSpec node_spec(const Shape& input, std::size_t depth, std::size_t classes, std::size_t width) {
  if (input.size() != 3) throw ShapeError("node input must be C x H x W");
  if (depth == 0 || classes == 0) throw std::invalid_argument("node needs depth >= 1 and classes >= 1");
  const std::size_t w = width == 0 ? input[0] : width;
  NetworkSpec spec{input, {}};
  for (std::size_t i = 0; i < depth; ++i) {
    spec.layers.push_back(LayerSpec::conv3(w));
    spec.layers.push_back(LayerSpec::relu());
  }
  if (input[1] >= 4 && input[2] >= 4) spec.layers.push_back(LayerSpec::maxpool());
  spec.layers.push_back(LayerSpec::linear(classes));
  spec.layers.push_back(LayerSpec::softmax());
  return spec;
}

NetworkSpec flat_spec(const Shape& input, std::size_t classes) {
  if (input.size() != 3) throw ShapeError("classifier input must be C x H x W");
  const std::size_t w = 2 * input[0];
  NetworkSpec spec{input, {}};
  for (int i = 0; i < 3; ++i) {
    spec.layers.push_back(LayerSpec::conv3(w));
    spec.layers.push_back(LayerSpec::relu());
  }
  if (input[1] >= 4 && input[2] >= 4) spec.layers.push_back(LayerSpec::maxpool());
  spec.layers.push_back(LayerSpec::linear(128));
  spec.layers.push_back(LayerSpec::relu());
  spec.layers.push_back(LayerSpec::linear(classes));
  spec.layers.push_back(LayerSpec::softmax());
  return spec;
}

void RoiSet::push(std::span<const float> f, int label, std::uint32_t image_index, const BBox& box) {
  if (f.size() != volume()) throw ShapeError("RoI feature has the wrong size");
  features.insert(features.end(), f.begin(), f.end());
  labels.push_back(label);
  image.push_back(image_index);
  boxes.push_back(box);
}

RoiSet RoiSet::select(const std::vector<std::size_t>& indices) const {
  RoiSet out;
  out.shape = shape;
  out.features.reserve(indices.size() * volume());
  for (auto i : indices) out.push(feature(i), labels[i], image[i], boxes[i]);
  return out;
}

std::vector<std::size_t> RoiSet::from_images(const std::vector<std::size_t>& images) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < size(); ++i) {
    if (std::binary_search(images.begin(), images.end(), static_cast<std::size_t>(image[i]))) out.push_back(i);
  }
  return out;
}

namespace {

struct ImageRois {
  std::vector<float> features;
  std::vector<int> labels;
  std::vector<BBox> boxes;
};

template <typename Pick>
RoiSet collect(const Rpn& rpn, const DatasetManifest& data, const RoiSampling& cfg, Pick pick) {
  const Shape fshape = rpn.feature_shape();
  const Shape pooled{fshape[0], cfg.pool, cfg.pool};
  const std::size_t vol = shape_volume(pooled);
  std::vector<ImageRois> per_image(data.samples.size());
  const auto n = static_cast<std::ptrdiff_t>(data.samples.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    const auto& sample = data.samples[idx];
    const RpnPass pass = run_rpn(rpn, sample.pixels);
    const auto rois = decode_proposals(rpn, pass.head, cfg.proposals, cfg.rpn_nms_iou);
    std::vector<BBox> boxes;
    for (const auto& r : rois) boxes.push_back(r.box);
    const auto chosen = pick(idx, sample, boxes);
    const auto labels = label_rois(chosen, sample.annotations);
    auto& out = per_image[idx];
    for (std::size_t r = 0; r < chosen.size(); ++r) {
      const Tensor f = roi_pool(pass.features, chosen[r], cfg.pool, rpn.spatial_scale());
      out.features.insert(out.features.end(), f.data(), f.data() + vol);
      out.labels.push_back(labels[r]);
      out.boxes.push_back(chosen[r]);
    }
  }
  RoiSet set;
  set.shape = pooled;
  for (std::size_t i = 0; i < per_image.size(); ++i) {
    auto& p = per_image[i];
    set.features.insert(set.features.end(), p.features.begin(), p.features.end());
    set.labels.insert(set.labels.end(), p.labels.begin(), p.labels.end());
    set.boxes.insert(set.boxes.end(), p.boxes.begin(), p.boxes.end());
    set.image.insert(set.image.end(), p.labels.size(), static_cast<std::uint32_t>(i));
  }
  return set;
}

}  // namespace

RoiSet collect_training_rois(const Rpn& rpn, const DatasetManifest& data, const RoiSampling& cfg, std::uint64_t seed) {
  return collect(rpn, data, cfg, [&](std::size_t idx, const ImageSample& sample, const std::vector<BBox>& proposals) {
    Rng rng(derive_seed(seed, "rois/sample", idx));
    const auto labels = label_rois(proposals, sample.annotations);
    std::vector<BBox> pos, neg;
    for (std::size_t r = 0; r < proposals.size(); ++r) (labels[r] == kBackground ? neg : pos).push_back(proposals[r]);
    rng.shuffle(pos.begin(), pos.end());
    rng.shuffle(neg.begin(), neg.end());
    std::vector<BBox> chosen;
    for (const auto& a : sample.annotations) chosen.push_back(a.box);
    for (const auto& b : pos) {
      if (chosen.size() >= cfg.max_positive) break;
      chosen.push_back(b);
    }
    for (std::size_t i = 0; i < neg.size() && i < cfg.max_background; ++i) chosen.push_back(neg[i]);
    return chosen;
  });
}

RoiSet collect_proposal_rois(const Rpn& rpn, const DatasetManifest& data, const RoiSampling& cfg) {
  return collect(rpn, data, cfg,
                 [](std::size_t, const ImageSample&, const std::vector<BBox>& proposals) { return proposals; });
}

namespace {

Tensor gather_batch(const RoiSet& data, std::span<const std::size_t> idx) {
  Shape shape = data.shape;
  shape.insert(shape.begin(), idx.size());
  Tensor batch(shape);
  const std::size_t vol = data.volume();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(data.features.data() + idx[i] * vol, vol, batch.data() + i * vol);
  }
  return batch;
}

}  // namespace

std::vector<double> train_classifier(Network& net, const RoiSet& data, const std::vector<int>& targets,
                                     const TrainConfig& cfg, std::uint64_t seed, const EpochHook& hook) {
  if (targets.size() != data.size()) throw std::invalid_argument("one target per RoI required");
  if (data.shape != net.spec().input_shape) {
    throw ShapeError("RoI features " + shape_to_string(data.shape) + " do not fit network input " +
                     shape_to_string(net.spec().input_shape));
  }
  const std::size_t classes = output_shape(net.spec())[0];
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] >= static_cast<int>(classes)) throw std::out_of_range("target class out of range");
    if (targets[i] >= 0) order.push_back(i);
  }
  std::vector<double> history;
  if (order.empty()) return history;
  Rng rng(derive_seed(seed, "classifier/order"));
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double total = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, stop - start);
      auto pass = forward(net, gather_batch(data, idx));
      Tensor grad(pass.output.shape());
      const auto n = static_cast<float>(idx.size());
      for (std::size_t b = 0; b < idx.size(); ++b) {
        const auto label = static_cast<std::size_t>(targets[idx[b]]);
        const std::span<const float> probs(pass.output.data() + b * classes, classes);
        total += cross_entropy(probs, label);
        for (std::size_t c = 0; c < classes; ++c) {
          grad[b * classes + c] = (probs[c] - (c == label ? 1.0f : 0.0f)) / n;
        }
      }
      apply_sgd(net, backward_from_logits(net, pass.activations, grad), epoch, cfg);
    }
    const double mean = total / static_cast<double>(order.size());
    if (!std::isfinite(mean)) throw DivergenceError("classifier loss became non-finite in epoch " + std::to_string(epoch));
    history.push_back(mean);
    if (hook) hook(epoch, net);
  }
  return history;
}

namespace {

constexpr std::size_t kInferenceChunk = 256;

}  // namespace

Tensor predict(const Network& net, const RoiSet& data, const std::vector<std::size_t>& indices) {
  std::vector<std::size_t> idx = indices;
  if (idx.empty()) {
    idx.resize(data.size());
    std::iota(idx.begin(), idx.end(), 0);
  }
  const std::size_t classes = output_shape(net.spec())[0];
  Tensor out({std::max<std::size_t>(idx.size(), 1), classes}, 0.0f);
  for (std::size_t start = 0; start < idx.size(); start += kInferenceChunk) {
    const std::size_t stop = std::min(idx.size(), start + kInferenceChunk);
    const auto pass = forward(net, gather_batch(data, std::span<const std::size_t>(idx.data() + start, stop - start)));
    std::copy_n(pass.output.data(), (stop - start) * classes, out.data() + start * classes);
  }
  return out;
}

NodeOutputs run_node(const Network& net, const RoiSet& data) {
  const auto& spec = net.spec();
  const std::size_t classes = output_shape(spec)[0];
  const std::size_t trunk = trunk_length(spec);
  NodeOutputs out;
  out.trunk.shape = trunk_output_shape(spec);
  out.trunk.labels = data.labels;
  out.trunk.image = data.image;
  out.trunk.boxes = data.boxes;
  const std::size_t tvol = out.trunk.volume();
  out.trunk.features.resize(data.size() * tvol);
  out.probs = Tensor({std::max<std::size_t>(data.size(), 1), classes}, 0.0f);
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  for (std::size_t start = 0; start < all.size(); start += kInferenceChunk) {
    const std::size_t stop = std::min(all.size(), start + kInferenceChunk);
    const auto pass = forward(net, gather_batch(data, std::span<const std::size_t>(all.data() + start, stop - start)));
    std::copy_n(pass.output.data(), (stop - start) * classes, out.probs.data() + start * classes);
    const auto& t = pass.activations.outputs[trunk];
    std::copy_n(t.data(), (stop - start) * tvol, out.trunk.features.data() + start * tvol);
  }
  return out;
}

}  // namespace hcount
