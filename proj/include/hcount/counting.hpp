#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "hcount/classifier.hpp"
#include "hcount/hierarchy.hpp"
#include "hcount/metrics.hpp"

namespace hcount {

struct CountConfig {
  std::size_t proposals = 64;
  double rpn_nms_iou = 0.7;
  double nms_iou = 0.5;
  double score_threshold = 0;  // applied to the path score before NMS
};

struct CostReport {
  std::uint64_t operations = 0;
  std::uint64_t path_memory_bytes = 0;
  /// Proposals, then the RoIs kept after each path node, then after NMS.
  std::vector<std::size_t> rois_per_stage;
};

struct CountResult {
  std::size_t count = 0;
  std::vector<ScoredBox> surviving_boxes;
  std::vector<std::size_t> path;  // node ids whose networks ran (or would run)
  CostReport cost;
  bool degenerate = false;  // an untrained node on the path
};

/// Category index from a name or a decimal index. Throws std::out_of_range
/// naming the valid categories.
int resolve_query(const CategorySet& categories, const std::string& query);

/// Internal nodes from the root down to the parent of q's leaf.
std::vector<std::size_t> query_path(const Hierarchy& h, int category);

/// RPN output for one image, shared by all queries on it.
struct ImagePass {
  std::vector<RoI> proposals;
  RoiSet pooled;  // one pooled RoI per proposal, labels unset
  std::uint64_t rpn_operations = 0;
  std::uint64_t pool_operations = 0;
};
ImagePass prepare_image(const Rpn& rpn, const Tensor& image, const CountConfig& cfg, std::size_t pool);

/// Node outputs per node id for one image. A node always sees the same RoIs
/// whatever the query, so results can be reused across queries.
using NodeCache = std::map<std::size_t, NodeOutputs>;

CountResult route_and_count(const Hierarchy& h, const Tensor& image, int category, const CountConfig& cfg);
CountResult route_and_count(const Hierarchy& h, const ImagePass& pass, int category, const CountConfig& cfg,
                            NodeCache* cache = nullptr);

struct FlatDetector {
  Rpn rpn;
  Network classifier;  // categories in index order, background last
  std::size_t pool = 7;
  CategorySet categories;
};

FlatDetector train_flat_detector(const Rpn& rpn, const DatasetManifest& data, const TrainConfig& cfg,
                                 const RoiSampling& sampling, std::uint64_t seed);
CountResult flat_count(const FlatDetector& flat, const Tensor& image, int category, const CountConfig& cfg);
CountResult flat_count(const FlatDetector& flat, const ImagePass& pass, int category, const CountConfig& cfg,
                       const Tensor* probs = nullptr);

/// A single-node tree whose root is the flat classifier itself.
Hierarchy as_depth_one(const FlatDetector& flat);

void save_flat_detector(const std::filesystem::path& dir, const FlatDetector& flat);
FlatDetector load_flat_detector(const std::filesystem::path& dir);

/// Static figures: RPN plus path-node bytes, and worst-case operations with
/// every proposal reaching every path node.
CostReport cost_report(const Hierarchy& h, int category, const CountConfig& cfg);
CostReport flat_cost_report(const FlatDetector& flat, const CountConfig& cfg);
/// Largest static path memory over all categories.
std::uint64_t longest_path_memory(const Hierarchy& h);

struct EvalRecord {
  std::string id;
  std::string query;
  std::size_t true_count = 0;
  std::size_t reported_count = 0;
  std::uint64_t ops = 0;
  std::uint64_t path_memory = 0;
};

struct EvalSummary {
  double rmse = 0;
  double map = 0;
  std::map<std::size_t, double> ratios;
  double mean_ops = 0;
  double mean_path_memory = 0;
  std::size_t degenerate_queries = 0;
};

struct Evaluation {
  std::vector<EvalRecord> records;
  EvalSummary summary;
  nlohmann::json to_json() const;
};

/// Every category queried on every image, in image then category order.
Evaluation evaluate_hierarchy(const Hierarchy& h, const DatasetManifest& test, const CountConfig& cfg);
Evaluation evaluate_flat(const FlatDetector& flat, const DatasetManifest& test, const CountConfig& cfg);

}  // namespace hcount
