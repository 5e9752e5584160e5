#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "hcount/counting.hpp"
#include "hcount/report.hpp"

namespace hcount {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Every field has a default, so `{}` is a valid config file.
struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t train_images = 2000;
  std::size_t test_images = 500;
  DatasetConfig dataset;  // num_images is replaced by the two counts above
  RpnConfig rpn;
  TrainConfig rpn_train = default_rpn_train_config();
  TrainConfig train;
  SearchConfig search;
  std::optional<MembershipParams> membership;
  RoiSampling sampling;
  CountConfig count;
  /// Grouping for the semantic-tree baseline: by detail mark, across families.
  nlohmann::json semantic_partition = nlohmann::json::array(
      {nlohmann::json::array({"disc", "block", "wedge"}), nlohmann::json::array({"disc-dot", "block-dot", "wedge-dot"}),
       nlohmann::json::array({"disc-bar", "block-bar"})});
  std::filesystem::path output_dir = "hcount-run";
  int workers = 0;  // 0: all available cores

  /// Keys absent from `j` keep the values in `base`; unknown keys are errors.
  static RunConfig from_json(const nlohmann::json& j, RunConfig base);
  static RunConfig from_json(const nlohmann::json& j) { return from_json(j, RunConfig()); }
  nlohmann::json to_json() const;
  /// Throws ConfigError.
  void validate() const;
};

/// Reads a JSON config file; ConfigError on unreadable or malformed files.
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});

/// Stage runner over one output directory. Each stage stores its artifacts
/// plus a stamp derived from its config slice and upstream stamps in
/// stages.json; a rerun with a matching stamp and present artifacts loads
/// instead of recomputing.
class Pipeline {
 public:
  explicit Pipeline(RunConfig cfg);

  const RunConfig& config() const { return cfg_; }
  const std::filesystem::path& dir() const { return cfg_.output_dir; }

  const DatasetManifest& train_data();
  const DatasetManifest& test_data();
  const Rpn& rpn();
  /// Untrained tree; `name` selects the artifact directory. With a partition
  /// the grouping is taken from it instead of the softmax similarity.
  Hierarchy built_tree(const std::string& name = "tree", const std::optional<nlohmann::json>& partition = {});
  Hierarchy trained_tree(const std::string& name = "tree", const std::optional<nlohmann::json>& partition = {});
  const FlatDetector& flat();

  Evaluation evaluate_tree(const Hierarchy& h, const std::string& name);
  Evaluation evaluate_flat_detector();

  /// Hierarchical vs flat vs semantic tree; writes compare.json and figures.
  CompareReport compare();

 private:
  std::string stamp(const std::string& stage, const nlohmann::json& inputs) const;
  bool fresh(const std::string& stage, const std::string& stamp) const;
  void record(const std::string& stage, const std::string& stamp);
  void write_json(const std::filesystem::path& file, const nlohmann::json& j) const;

  RunConfig cfg_;
  std::optional<DatasetManifest> train_, test_;
  std::optional<Rpn> rpn_;
  std::optional<FlatDetector> flat_;
  std::string data_stamp_, rpn_stamp_;
};

}  // namespace hcount
