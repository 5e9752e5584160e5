#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "hcount/classifier.hpp"
#include "hcount/dataset.hpp"
#include "hcount/network.hpp"

namespace hcount {

struct CandidateRecord {
  std::size_t depth = 0;
  double map = 0;        // in [0, 1]
  double memory_mb = 0;  // 32-bit parameters, 1 MB = 1e6 bytes
};

struct SearchConfig {
  double threshold = 0.001;
  std::size_t max_depth = 3;
  std::size_t probe_epochs = 5;
  double subsample_fraction = 0.5;
  /// Share of the subsample held out for candidate mAP.
  double holdout_fraction = 0.2;

  void validate() const;
};

inline double megabytes(std::uint64_t bytes) { return static_cast<double>(bytes) / 1e6; }

/// (a_next - a) / (m_next - m). Throws std::domain_error if the memories are equal.
double delta_id(const CandidateRecord& current, const CandidateRecord& next);

/// Deterministic random subset of images, stratified so that every category
/// present in the full set keeps roughly its share of images.
std::vector<std::size_t> sample_subset_indices(const DatasetManifest& data, double fraction, std::uint64_t seed);
DatasetManifest sample_subset(const DatasetManifest& data, double fraction, std::uint64_t seed);

/// Least-squares fit of c - alpha * e^-beta over epochs 1..n (beta > 0,
/// c in [last, 1]) evaluated at full_epochs. Falls back to the last value when
/// the curve is not increasing or the fit is not finite.
double extrapolate_map(const std::vector<double>& history, std::size_t full_epochs);

struct SearchStep {
  CandidateRecord current;
  CandidateRecord next;
  double delta = 0;
  bool advance = false;
};

struct SearchTrace {
  std::vector<SearchStep> steps;
  std::size_t selected_depth = 1;
  bool reached_max_depth = false;
  double threshold = 0;

  nlohmann::json to_json() const;
};

using CandidateEvaluator = std::function<CandidateRecord(std::size_t depth)>;

/// The depth loop: starting at 1, compare depth i against i + 1 and advance
/// while the information-density gain exceeds the threshold. Each depth is
/// evaluated at most once.
SearchTrace select_depth(const CandidateEvaluator& evaluate, const SearchConfig& cfg);

/// Training and held-out data for one tree node, already in the node's input
/// feature space.
struct NodeData {
  RoiSet train;
  std::vector<int> train_targets;  // class index, < 0 skips
  RoiSet eval;                     // held-out proposals; eval.image indexes eval_truths
  std::vector<std::vector<Annotation>> eval_truths;  // category = class index
  std::size_t classes = 0;
  int background = -1;  // background class index, -1 when absent
};

/// Detection mAP of a node classifier on the held-out proposals: every RoI
/// scores each non-background class, per-class NMS at 0.5 per image.
double node_map(const Network& net, const NodeData& data);

struct ArchitectureChoice {
  NetworkSpec spec;
  SearchTrace trace;
};

/// Depth search over node_spec candidates trained for probe_epochs and
/// scored by extrapolated held-out mAP against parameter memory.
ArchitectureChoice select_architecture(const NodeData& data, const SearchConfig& cfg, const TrainConfig& train,
                                       std::uint64_t seed);

}  // namespace hcount
