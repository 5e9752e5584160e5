#include "hcount/counting.hpp"

#include <algorithm>
#include <charconv>
#include <numeric>

#include <spdlog/spdlog.h>

#include "hcount/model_io.hpp"
#include "hcount/rng.hpp"

namespace hcount {

int resolve_query(const CategorySet& categories, const std::string& query) {
  int index = -1;
  const auto [ptr, ec] = std::from_chars(query.data(), query.data() + query.size(), index);
  if (ec == std::errc() && ptr == query.data() + query.size()) {
    if (index >= 0 && static_cast<std::size_t>(index) < categories.size()) return index;
  } else {
    for (std::size_t i = 0; i < categories.size(); ++i)
      if (categories.names[i] == query) return static_cast<int>(i);
  }
  std::string names;
  for (const auto& n : categories.names) names += (names.empty() ? "" : ", ") + n;
  throw std::out_of_range("unknown category '" + query + "'; valid categories: " + names);
}

std::vector<std::size_t> query_path(const Hierarchy& h, int category) {
  auto path = h.path_to(category);
  path.pop_back();  // the leaf runs no network
  return path;
}

ImagePass prepare_image(const Rpn& rpn, const Tensor& image, const CountConfig& cfg, std::size_t pool) {
  ImagePass pass;
  const RpnPass rp = run_rpn(rpn, image);
  pass.rpn_operations = flop_count(rpn.net.spec());
  pass.proposals = decode_proposals(rpn, rp.head, cfg.proposals, cfg.rpn_nms_iou);
  const Shape fshape = rpn.feature_shape();
  pass.pooled.shape = {fshape[0], pool, pool};
  for (const auto& r : pass.proposals) {
    const Tensor f = roi_pool(rp.features, r.box, pool, rpn.spatial_scale());
    pass.pooled.push({f.data(), f.size()}, kBackground, 0, r.box);
  }
  pass.pool_operations = pass.proposals.size() * shape_volume(pass.pooled.shape);
  return pass;
}

namespace {

std::size_t argmax_row(const Tensor& probs, std::size_t row, std::size_t classes) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < classes; ++c)
    if (probs[row * classes + c] > probs[row * classes + best]) best = c;
  return best;
}

void finish(CountResult& out, const std::vector<BBox>& boxes, const std::vector<double>& scores, const CountConfig& cfg) {
  std::vector<ScoredBox> candidates;
  for (std::size_t i = 0; i < boxes.size(); ++i)
    if (scores[i] >= cfg.score_threshold) candidates.push_back({boxes[i], scores[i]});
  for (auto k : nms(candidates, cfg.nms_iou)) out.surviving_boxes.push_back(candidates[k]);
  out.count = out.surviving_boxes.size();
  out.cost.rois_per_stage.push_back(out.count);
}

}  // namespace

CountResult route_and_count(const Hierarchy& h, const Tensor& image, int category, const CountConfig& cfg) {
  return route_and_count(h, prepare_image(h.rpn, image, cfg, h.pool), category, cfg);
}

CountResult route_and_count(const Hierarchy& h, const ImagePass& pass, int category, const CountConfig& cfg,
                            NodeCache* cache) {
  CountResult out;
  out.path = query_path(h, category);
  out.cost.operations = pass.rpn_operations;
  out.cost.path_memory_bytes = param_memory(h.rpn.net.spec());
  for (auto id : out.path)
    if (h.nodes[id].net) out.cost.path_memory_bytes += param_memory(h.nodes[id].net->spec());
  out.cost.rois_per_stage.push_back(pass.proposals.size());
  if (pass.proposals.empty()) {
    out.cost.rois_per_stage.push_back(0);
    return out;
  }
  out.cost.operations += pass.pool_operations;

  std::vector<std::size_t> alive(pass.proposals.size());
  std::iota(alive.begin(), alive.end(), 0);  // indices into pass.proposals
  std::vector<double> score(pass.proposals.size(), 1.0);
  const RoiSet* input = &pass.pooled;
  NodeOutputs local;
  for (auto id : out.path) {
    const TreeNode& node = h.nodes[id];
    if (node.degenerate || !node.trained || !node.net) {
      out.degenerate = true;
      out.cost.rois_per_stage.push_back(0);
      return out;
    }
    if (alive.empty()) {
      out.cost.rois_per_stage.push_back(0);
      continue;
    }
    const NodeOutputs* outputs = nullptr;
    if (cache) {
      auto it = cache->find(id);
      if (it == cache->end()) it = cache->emplace(id, run_node(*node.net, *input)).first;
      outputs = &it->second;
    } else {
      local = run_node(*node.net, *input);
      outputs = &local;
    }
    out.cost.operations += flop_count(node.net->spec()) * alive.size();
    const std::size_t classes = node.class_count();
    const std::size_t slot = h.child_slot(node, category);
    std::vector<std::size_t> kept_rows, kept;
    for (std::size_t r = 0; r < alive.size(); ++r) {
      if (argmax_row(outputs->probs, r, classes) == slot) {
        kept_rows.push_back(r);
        kept.push_back(alive[r]);
        score[alive[r]] *= outputs->probs[r * classes + slot];
      }
    }
    out.cost.rois_per_stage.push_back(kept.size());
    alive = kept;
    // Next node sees this node's trunk for the surviving RoIs.
    RoiSet next = outputs->trunk.select(kept_rows);
    local.trunk = std::move(next);
    input = &local.trunk;
  }
  std::vector<BBox> boxes;
  std::vector<double> scores;
  for (auto i : alive) {
    boxes.push_back(pass.proposals[i].box);
    scores.push_back(score[i]);
  }
  finish(out, boxes, scores, cfg);
  return out;
}

FlatDetector train_flat_detector(const Rpn& rpn, const DatasetManifest& data, const TrainConfig& cfg,
                                 const RoiSampling& sampling, std::uint64_t seed) {
  FlatDetector flat;
  flat.rpn = rpn;
  flat.pool = sampling.pool;
  flat.categories = data.categories;
  const RoiSet rois = collect_training_rois(rpn, data, sampling, derive_seed(seed, "flat/rois"));
  const auto k = static_cast<int>(data.categories.size());
  std::vector<int> targets;
  for (auto l : rois.labels) targets.push_back(l == kBackground ? k : l);
  flat.classifier = Network(flat_spec(rois.shape, data.categories.size() + 1), derive_seed(seed, "flat/init"));
  const auto losses = train_classifier(flat.classifier, rois, targets, cfg, derive_seed(seed, "flat/train"));
  if (!losses.empty()) spdlog::info("flat classifier: loss {:.4f} -> {:.4f} on {} RoIs", losses.front(), losses.back(), rois.size());
  return flat;
}

CountResult flat_count(const FlatDetector& flat, const Tensor& image, int category, const CountConfig& cfg) {
  return flat_count(flat, prepare_image(flat.rpn, image, cfg, flat.pool), category, cfg);
}

CountResult flat_count(const FlatDetector& flat, const ImagePass& pass, int category, const CountConfig& cfg,
                       const Tensor* probs) {
  if (category < 0 || static_cast<std::size_t>(category) >= flat.categories.size()) {
    resolve_query(flat.categories, std::to_string(category));
  }
  CountResult out;
  out.path = {0};
  out.cost.operations = pass.rpn_operations;
  out.cost.path_memory_bytes = param_memory(flat.rpn.net.spec()) + param_memory(flat.classifier.spec());
  out.cost.rois_per_stage.push_back(pass.proposals.size());
  if (pass.proposals.empty()) {
    out.cost.rois_per_stage.push_back(0);
    return out;
  }
  out.cost.operations += pass.pool_operations + flop_count(flat.classifier.spec()) * pass.proposals.size();
  Tensor local;
  if (!probs) {
    local = predict(flat.classifier, pass.pooled);
    probs = &local;
  }
  const std::size_t classes = flat.categories.size() + 1;
  std::vector<BBox> boxes;
  std::vector<double> scores;
  for (std::size_t r = 0; r < pass.proposals.size(); ++r) {
    if (argmax_row(*probs, r, classes) == static_cast<std::size_t>(category)) {
      boxes.push_back(pass.proposals[r].box);
      scores.push_back((*probs)[r * classes + static_cast<std::size_t>(category)]);
    }
  }
  out.cost.rois_per_stage.push_back(boxes.size());
  finish(out, boxes, scores, cfg);
  return out;
}

Hierarchy as_depth_one(const FlatDetector& flat) {
  Hierarchy h;
  h.categories = flat.categories;
  h.rpn = flat.rpn;
  h.pool = flat.pool;
  const std::size_t k = flat.categories.size();
  TreeNode root;
  root.id = 0;
  root.input_shape = flat.classifier.spec().input_shape;
  const auto& layers = flat.classifier.spec().layers;
  root.conv_depth = static_cast<std::size_t>(
      std::count_if(layers.begin(), layers.end(), [](const LayerSpec& l) { return l.kind == LayerKind::Conv3; }));
  root.net = flat.classifier;
  root.trained = true;
  for (std::size_t c = 0; c < k; ++c) {
    root.members.push_back(static_cast<int>(c));
    root.children.push_back(c + 1);
  }
  h.nodes.push_back(root);
  for (std::size_t c = 0; c < k; ++c) {
    TreeNode leaf;
    leaf.id = c + 1;
    leaf.parent = 0;
    leaf.members = {static_cast<int>(c)};
    h.nodes.push_back(leaf);
  }
  h.validate();
  return h;
}

void save_flat_detector(const std::filesystem::path& dir, const FlatDetector& flat) {
  std::filesystem::create_directories(dir);
  save_model(dir / "flat.hcnt", flat.classifier,
             {{"flat", {{"pool", flat.pool}, {"categories", category_set_to_json(flat.categories)}}}});
  save_rpn(dir / "rpn.hcnt", flat.rpn);
}

FlatDetector load_flat_detector(const std::filesystem::path& dir) {
  ModelFile file = load_model(dir / "flat.hcnt");
  FlatDetector flat;
  try {
    const auto& s = file.sections.at("flat");
    flat.pool = s.at("pool");
    flat.categories = category_set_from_json(s.at("categories"));
  } catch (const nlohmann::json::exception& e) {
    throw ModelFormatError((dir / "flat.hcnt").string() + ": malformed flat section: " + e.what());
  }
  flat.classifier = std::move(file.net);
  flat.rpn = load_rpn(dir / "rpn.hcnt");
  return flat;
}

CostReport cost_report(const Hierarchy& h, int category, const CountConfig& cfg) {
  CostReport out;
  const Shape fshape = h.rpn.feature_shape();
  out.operations = flop_count(h.rpn.net.spec()) + cfg.proposals * fshape[0] * h.pool * h.pool;
  out.path_memory_bytes = param_memory(h.rpn.net.spec());
  out.rois_per_stage.push_back(cfg.proposals);
  for (auto id : query_path(h, category)) {
    const TreeNode& node = h.nodes[id];
    const NetworkSpec spec = node.net ? node.net->spec() : node_spec(node.input_shape, std::max<std::size_t>(node.conv_depth, 1), node.class_count());
    out.operations += flop_count(spec) * cfg.proposals;
    out.path_memory_bytes += param_memory(spec);
    out.rois_per_stage.push_back(cfg.proposals);
  }
  return out;
}

CostReport flat_cost_report(const FlatDetector& flat, const CountConfig& cfg) {
  CostReport out;
  const Shape fshape = flat.rpn.feature_shape();
  out.operations = flop_count(flat.rpn.net.spec()) + cfg.proposals * fshape[0] * flat.pool * flat.pool +
                   flop_count(flat.classifier.spec()) * cfg.proposals;
  out.path_memory_bytes = param_memory(flat.rpn.net.spec()) + param_memory(flat.classifier.spec());
  out.rois_per_stage = {cfg.proposals, cfg.proposals};
  return out;
}

std::uint64_t longest_path_memory(const Hierarchy& h) {
  std::uint64_t best = 0;
  for (std::size_t c = 0; c < h.categories.size(); ++c)
    best = std::max(best, cost_report(h, static_cast<int>(c), CountConfig{}).path_memory_bytes);
  return best;
}

namespace {

struct ImageResults {
  std::vector<EvalRecord> records;
  std::vector<Detection> detections;
  bool degenerate = false;
  std::size_t degenerate_queries = 0;
};

template <typename CountFn>
Evaluation evaluate(const DatasetManifest& test, const CategorySet& cats, CountFn count_image) {
  std::vector<ImageResults> per_image(test.samples.size());
  const auto n = static_cast<std::ptrdiff_t>(test.samples.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto& sample = test.samples[static_cast<std::size_t>(i)];
    auto& out = per_image[static_cast<std::size_t>(i)];
    const auto results = count_image(sample);
    for (std::size_t q = 0; q < cats.size(); ++q) {
      const auto& r = results[q];
      std::size_t truth = 0;
      for (const auto& a : sample.annotations) truth += a.category == static_cast<int>(q);
      out.records.push_back({sample.id, cats.names[q], truth, r.count, r.cost.operations, r.cost.path_memory_bytes});
      out.degenerate_queries += r.degenerate;
      for (const auto& b : r.surviving_boxes) out.detections.push_back({b.box, b.score, static_cast<int>(q)});
    }
  }
  Evaluation ev;
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<Annotation>> truths;
  std::vector<double> reported, actual;
  std::vector<std::size_t> reported_n, actual_n;
  double ops = 0, memory = 0;
  for (std::size_t i = 0; i < per_image.size(); ++i) {
    auto& p = per_image[i];
    for (auto& r : p.records) {
      reported.push_back(static_cast<double>(r.reported_count));
      actual.push_back(static_cast<double>(r.true_count));
      reported_n.push_back(r.reported_count);
      actual_n.push_back(r.true_count);
      ops += static_cast<double>(r.ops);
      memory += static_cast<double>(r.path_memory);
      ev.records.push_back(std::move(r));
    }
    ev.summary.degenerate_queries += p.degenerate_queries;
    dets.push_back(std::move(p.detections));
    truths.push_back(test.samples[i].annotations);
  }
  if (!ev.records.empty()) {
    ev.summary.rmse = rmse(reported, actual);
    ev.summary.mean_ops = ops / static_cast<double>(ev.records.size());
    ev.summary.mean_path_memory = memory / static_cast<double>(ev.records.size());
  }
  ev.summary.ratios = normalized_count_ratio(actual_n, reported_n);
  try {
    ev.summary.map = mean_average_precision(dets, truths, 0.5);
  } catch (const MetricError&) {
    ev.summary.map = 0;
  }
  return ev;
}

}  // namespace

Evaluation evaluate_hierarchy(const Hierarchy& h, const DatasetManifest& test, const CountConfig& cfg) {
  return evaluate(test, h.categories, [&](const ImageSample& s) {
    const ImagePass pass = prepare_image(h.rpn, s.pixels, cfg, h.pool);
    NodeCache cache;
    std::vector<CountResult> out;
    for (std::size_t q = 0; q < h.categories.size(); ++q) out.push_back(route_and_count(h, pass, static_cast<int>(q), cfg, &cache));
    return out;
  });
}

Evaluation evaluate_flat(const FlatDetector& flat, const DatasetManifest& test, const CountConfig& cfg) {
  return evaluate(test, flat.categories, [&](const ImageSample& s) {
    const ImagePass pass = prepare_image(flat.rpn, s.pixels, cfg, flat.pool);
    const Tensor probs = pass.proposals.empty() ? Tensor() : predict(flat.classifier, pass.pooled);
    std::vector<CountResult> out;
    for (std::size_t q = 0; q < flat.categories.size(); ++q) out.push_back(flat_count(flat, pass, static_cast<int>(q), cfg, &probs));
    return out;
  });
}

nlohmann::json Evaluation::to_json() const {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : records) {
    recs.push_back({{"id", r.id},
                    {"query", r.query},
                    {"true_count", r.true_count},
                    {"reported_count", r.reported_count},
                    {"ops", r.ops},
                    {"path_memory", r.path_memory}});
  }
  nlohmann::json ratios = nlohmann::json::object();
  for (const auto& [n, v] : summary.ratios) ratios[std::to_string(n)] = v;
  return {{"records", recs},
          {"summary",
           {{"rmse", summary.rmse},
            {"map", summary.map},
            {"ratios", ratios},
            {"mean_ops", summary.mean_ops},
            {"mean_path_memory", summary.mean_path_memory},
            {"degenerate_queries", summary.degenerate_queries}}}};
}

}  // namespace hcount
