#include "hcount/proposals.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <spdlog/spdlog.h>

#include "hcount/kernels.hpp"
#include "hcount/model_io.hpp"
#include "hcount/rng.hpp"

namespace hcount {

std::vector<BBox> generate_anchors(const AnchorConfig& cfg, std::size_t image_size) {
  const auto cells = static_cast<std::size_t>(std::ceil(static_cast<double>(image_size) / cfg.stride));
  const auto extent = static_cast<double>(image_size);
  std::vector<BBox> out;
  out.reserve(cells * cells * cfg.per_cell());
  for (std::size_t y = 0; y < cells; ++y) {
    for (std::size_t x = 0; x < cells; ++x) {
      const double cx = (static_cast<double>(x) + 0.5) * cfg.stride;
      const double cy = (static_cast<double>(y) + 0.5) * cfg.stride;
      for (double scale : cfg.scales) {
        for (double ratio : cfg.aspect_ratios) {
          const double w = scale * std::sqrt(ratio), h = scale / std::sqrt(ratio);
          out.push_back(clip({cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}, extent, extent));
        }
      }
    }
  }
  return out;
}

Shape Rpn::feature_shape() const { return propagate_shapes(net.spec()).at(backbone_layers - 1); }

double Rpn::spatial_scale() const {
  return static_cast<double>(feature_shape()[1]) / static_cast<double>(image_size);
}

NetworkSpec default_rpn_spec(std::size_t image_size, std::size_t anchors_per_cell, std::size_t* backbone_layers) {
  NetworkSpec spec;
  spec.input_shape = {3, image_size, image_size};
  spec.layers = {LayerSpec::conv3(8),  LayerSpec::relu(), LayerSpec::maxpool(),
                 LayerSpec::conv3(16), LayerSpec::relu(), LayerSpec::maxpool(),
                 LayerSpec::conv3(16), LayerSpec::relu()};
  if (backbone_layers) *backbone_layers = spec.layers.size();
  spec.layers.push_back(LayerSpec::maxpool());
  spec.layers.push_back(LayerSpec::conv3(32));
  spec.layers.push_back(LayerSpec::relu());
  spec.layers.push_back(LayerSpec::conv3(6 * anchors_per_cell));
  return spec;
}

Rpn make_rpn(const RpnConfig& cfg, std::uint64_t seed) {
  Rpn rpn;
  rpn.anchors = cfg.anchors;
  rpn.image_size = cfg.image_size;
  auto spec = default_rpn_spec(cfg.image_size, cfg.anchors.per_cell(), &rpn.backbone_layers);
  const Shape out = output_shape(spec);
  const auto cells = static_cast<std::size_t>(std::ceil(static_cast<double>(cfg.image_size) / cfg.anchors.stride));
  if (out[1] != cells || out[2] != cells) {
    throw std::invalid_argument("anchor stride " + std::to_string(cfg.anchors.stride) + " does not match the head grid " +
                                shape_to_string(out));
  }
  rpn.net = Network(std::move(spec), seed);
  return rpn;
}

AnchorLabels label_anchors(const std::vector<BBox>& anchors, const std::vector<Annotation>& truths,
                           const RpnConfig& cfg) {
  AnchorLabels out{std::vector<int>(anchors.size(), 0), std::vector<int>(anchors.size(), -1)};
  std::vector<double> best_for_truth(truths.size(), 0.0);
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    double best = -1.0;
    for (std::size_t t = 0; t < truths.size(); ++t) {
      const double o = iou(anchors[a], truths[t].box);
      if (o > best) {
        best = o;
        out.matched[a] = static_cast<int>(t);
      }
      best_for_truth[t] = std::max(best_for_truth[t], o);
    }
    if (best >= cfg.positive_iou) {
      out.labels[a] = 1;
    } else if (best >= cfg.negative_iou) {
      out.labels[a] = -1;
    }
  }
  if (cfg.match_best_anchor) {
    for (std::size_t a = 0; a < anchors.size(); ++a) {
      for (std::size_t t = 0; t < truths.size(); ++t) {
        if (best_for_truth[t] > 0 && iou(anchors[a], truths[t].box) == best_for_truth[t]) {
          out.labels[a] = 1;
          out.matched[a] = static_cast<int>(t);
          break;
        }
      }
    }
  }
  return out;
}

Offsets encode_box(const BBox& anchor, const BBox& target) {
  const double aw = anchor.width(), ah = anchor.height();
  const double ax = anchor.x_min + aw / 2, ay = anchor.y_min + ah / 2;
  const double gw = target.width(), gh = target.height();
  const double gx = target.x_min + gw / 2, gy = target.y_min + gh / 2;
  return {(gx - ax) / aw, (gy - ay) / ah, std::log(gw / aw), std::log(gh / ah)};
}

BBox decode_box(const BBox& anchor, const Offsets& t) {
  constexpr double kMaxLogScale = 4.0;
  const double aw = anchor.width(), ah = anchor.height();
  const double cx = anchor.x_min + aw / 2 + t[0] * aw, cy = anchor.y_min + ah / 2 + t[1] * ah;
  const double w = aw * std::exp(std::min(t[2], kMaxLogScale));
  const double h = ah * std::exp(std::min(t[3], kMaxLogScale));
  return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

namespace {

Tensor stack_images(const DatasetManifest& data, std::span<const std::size_t> indices) {
  const std::size_t per = data.samples.at(indices.front()).pixels.size();
  Shape shape = data.samples[indices.front()].pixels.shape();
  shape.insert(shape.begin(), indices.size());
  Tensor batch(shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& px = data.samples[indices[i]].pixels;
    std::copy(px.data(), px.data() + per, batch.data() + i * per);
  }
  return batch;
}

}  // namespace

Rpn train_rpn(const DatasetManifest& data, const TrainConfig& train, const RpnConfig& cfg, std::uint64_t seed,
              RpnTrainReport* report) {
  if (data.samples.empty()) throw DatasetError("RPN training split is empty");
  Rpn rpn = make_rpn(cfg, derive_seed(seed, "rpn/init"));
  const auto anchors = generate_anchors(cfg.anchors, cfg.image_size);
  const std::size_t per_cell = cfg.anchors.per_cell();
  const Shape head_shape = output_shape(rpn.net.spec());
  const std::size_t grid = head_shape[1] * head_shape[2];

  std::vector<AnchorLabels> labels(data.samples.size());
  const auto n_images = static_cast<std::ptrdiff_t>(data.samples.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n_images; ++i) {
    labels[static_cast<std::size_t>(i)] = label_anchors(anchors, data.samples[static_cast<std::size_t>(i)].annotations, cfg);
  }
  const bool objectness_only = data.object_count() == 0;
  if (objectness_only) spdlog::warn("RPN training data has no objects; training objectness only");

  std::vector<std::size_t> order(data.samples.size());
  std::iota(order.begin(), order.end(), 0);
  Rng order_rng(derive_seed(seed, "rpn/order"));
  RpnTrainReport local;
  local.objectness_only = objectness_only;

  for (std::size_t epoch = 0; epoch < train.epochs; ++epoch) {
    order_rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += train.batch_size) {
      const std::size_t stop = std::min(order.size(), start + train.batch_size);
      const std::span<const std::size_t> batch_idx(order.data() + start, stop - start);
      const auto n = static_cast<double>(batch_idx.size());
      auto pass = forward(rpn.net, stack_images(data, batch_idx));
      Tensor grad(pass.output.shape());
      double batch_loss = 0;
      for (std::size_t b = 0; b < batch_idx.size(); ++b) {
        const std::size_t image = batch_idx[b];
        const auto& lab = labels[image];
        Rng rng(derive_seed(seed, "rpn/sample", epoch * data.samples.size() + image));
        std::vector<std::size_t> pos, neg;
        for (std::size_t a = 0; a < lab.labels.size(); ++a) {
          if (lab.labels[a] == 1) pos.push_back(a);
          if (lab.labels[a] == 0) neg.push_back(a);
        }
        rng.shuffle(pos.begin(), pos.end());
        rng.shuffle(neg.begin(), neg.end());
        pos.resize(std::min(pos.size(), cfg.max_positive));
        neg.resize(std::min(neg.size(), cfg.anchors_per_image - pos.size()));
        const double norm = static_cast<double>(pos.size() + neg.size());
        if (norm == 0) continue;
        const float* out = pass.output.data() + b * head_shape[0] * grid;
        float* g = grad.data() + b * head_shape[0] * grid;
        auto visit = [&](std::size_t a, bool positive) {
          const std::size_t cell = a / per_cell, j = a % per_cell;
          const double l0 = out[(2 * j) * grid + cell], l1 = out[(2 * j + 1) * grid + cell];
          const double m = std::max(l0, l1);
          const double e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
          const double p1 = e1 / (e0 + e1);
          const double p_true = positive ? p1 : 1 - p1;
          batch_loss -= std::log(std::max(p_true, kCrossEntropyFloor)) / norm;
          const double d1 = (p1 - (positive ? 1.0 : 0.0)) / norm / n;
          g[(2 * j + 1) * grid + cell] += static_cast<float>(d1);
          g[(2 * j) * grid + cell] -= static_cast<float>(d1);
          if (!positive || objectness_only) return;
          const Offsets target = encode_box(anchors[a], data.samples[image].annotations[static_cast<std::size_t>(lab.matched[a])].box);
          Box4 pred{};
          for (std::size_t k = 0; k < 4; ++k) pred[k] = out[(2 * per_cell + 4 * j + k) * grid + cell];
          batch_loss += cfg.regression_weight * smooth_l1(pred, target) / norm;
          const Box4 d = smooth_l1_grad(pred, target);
          for (std::size_t k = 0; k < 4; ++k) {
            g[(2 * per_cell + 4 * j + k) * grid + cell] += static_cast<float>(cfg.regression_weight * d[k] / norm / n);
          }
        };
        for (auto a : pos) visit(a, true);
        for (auto a : neg) visit(a, false);
      }
      if (!std::isfinite(batch_loss)) {
        throw DivergenceError("RPN loss became non-finite in epoch " + std::to_string(epoch));
      }
      epoch_loss += batch_loss;
      apply_sgd(rpn.net, backward(rpn.net, pass.activations, grad), epoch, train);
    }
    local.epoch_loss.push_back(epoch_loss / static_cast<double>(data.samples.size()));
    spdlog::debug("rpn epoch {} loss {:.4f}", epoch, local.epoch_loss.back());
  }
  if (report) *report = local;
  return rpn;
}

RpnPass run_rpn(const Rpn& rpn, const Tensor& image) {
  auto pass = forward(rpn.net, image);
  Tensor features = std::move(pass.activations.outputs[rpn.backbone_layers]);
  features.reshape(rpn.feature_shape());
  return {std::move(features), std::move(pass.output)};
}

std::vector<RoI> decode_proposals(const Rpn& rpn, const Tensor& head, std::size_t k, double nms_iou) {
  if (k == 0) return {};
  const auto anchors = generate_anchors(rpn.anchors, rpn.image_size);
  const std::size_t per_cell = rpn.anchors.per_cell();
  const std::size_t grid = head.dim(1) * head.dim(2);
  const auto extent = static_cast<double>(rpn.image_size);
  std::vector<ScoredBox> boxes;
  boxes.reserve(anchors.size());
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    const std::size_t cell = a / per_cell, j = a % per_cell;
    const double l0 = head[(2 * j) * grid + cell], l1 = head[(2 * j + 1) * grid + cell];
    Offsets t{};
    for (std::size_t c = 0; c < 4; ++c) t[c] = head[(2 * per_cell + 4 * j + c) * grid + cell];
    const BBox box = clip(decode_box(anchors[a], t), extent, extent);
    if (box.width() < 1 || box.height() < 1) continue;
    boxes.push_back({box, 1.0 / (1.0 + std::exp(l0 - l1))});
  }
  std::vector<RoI> out;
  for (auto i : nms(boxes, nms_iou)) {
    if (out.size() == k) break;
    out.push_back({boxes[i].box, boxes[i].score});
  }
  return out;
}

std::vector<RoI> propose(const Rpn& rpn, const ImageSample& image, std::size_t k, double nms_iou) {
  if (k == 0) return {};
  return decode_proposals(rpn, run_rpn(rpn, image.pixels).head, k, nms_iou);
}

double proposal_recall(const Rpn& rpn, const DatasetManifest& data, std::size_t k, double iou_threshold) {
  std::size_t hits = 0, total = 0;
  const auto n = static_cast<std::ptrdiff_t>(data.samples.size());
#pragma omp parallel for schedule(dynamic) reduction(+ : hits, total)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto& s = data.samples[static_cast<std::size_t>(i)];
    if (s.annotations.empty()) continue;
    const auto rois = propose(rpn, s, k);
    for (const auto& a : s.annotations) {
      ++total;
      hits += std::any_of(rois.begin(), rois.end(), [&](const RoI& r) { return iou(r.box, a.box) >= iou_threshold; });
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

Tensor roi_pool(const Tensor& feature_map, const BBox& roi, std::size_t pool, double spatial_scale) {
  if (feature_map.rank() != 3) throw ShapeError("roi_pool expects a C x H x W map");
  const std::size_t c = feature_map.dim(0), h = feature_map.dim(1), w = feature_map.dim(2);
  kernels::RoiWindow window{roi.x_min * spatial_scale, roi.y_min * spatial_scale, roi.x_max * spatial_scale,
                            roi.y_max * spatial_scale};
  if (window.x1 <= 0 || window.y1 <= 0 || window.x0 >= static_cast<double>(w) || window.y0 >= static_cast<double>(h)) {
    throw std::invalid_argument("roi does not intersect the feature map");
  }
  Tensor out({c, pool, pool});
  std::vector<std::uint32_t> argmax(out.size());
  kernels::roi_max_pool<float>(c, h, w, feature_map.values(), window, pool, out.values(), argmax);
  return out;
}

void save_rpn(const std::filesystem::path& path, const Rpn& rpn) {
  nlohmann::json section = {{"backbone_layers", rpn.backbone_layers},
                            {"image_size", rpn.image_size},
                            {"anchors",
                             {{"stride", rpn.anchors.stride},
                              {"scales", rpn.anchors.scales},
                              {"aspect_ratios", rpn.anchors.aspect_ratios}}}};
  save_model(path, rpn.net, {{"rpn", section}});
}

Rpn load_rpn(const std::filesystem::path& path) {
  ModelFile file = load_model(path);
  if (!file.sections.contains("rpn")) throw ModelFormatError(path.string() + ": missing rpn section");
  const auto& s = file.sections["rpn"];
  Rpn rpn;
  try {
    rpn.backbone_layers = s.at("backbone_layers");
    rpn.image_size = s.at("image_size");
    rpn.anchors.stride = s.at("anchors").at("stride");
    rpn.anchors.scales = s.at("anchors").at("scales").get<std::vector<double>>();
    rpn.anchors.aspect_ratios = s.at("anchors").at("aspect_ratios").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ModelFormatError(path.string() + ": malformed rpn section: " + e.what());
  }
  rpn.net = std::move(file.net);
  if (rpn.backbone_layers == 0 || rpn.backbone_layers >= rpn.net.spec().layers.size()) {
    throw ModelFormatError(path.string() + ": rpn backbone length out of range");
  }
  return rpn;
}

}  // namespace hcount
