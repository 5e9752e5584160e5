#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "hcount/archsearch.hpp"
#include "hcount/classifier.hpp"
#include "hcount/dataset.hpp"
#include "hcount/proposals.hpp"

namespace hcount {

class HierarchyError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct MembershipParams {
  double slope = 40;
  double center = 0.25;

  /// Centre at the uniform-confusion level 1/n, slope 10/centre.
  static MembershipParams for_members(std::size_t n);
  void validate() const;
};

/// 1 / (1 + exp(-slope * (x - center))).
double membership(double x, const MembershipParams& p);

struct SoftmaxProfile {
  std::vector<double> mass;  // over the node's classes, sums to 1
  std::size_t support = 0;
};

/// Mean softmax vector of `net` over the RoIs labeled with each member
/// category (rois.labels hold categories). Members without RoIs get a uniform
/// profile. Throws std::logic_error when no trained network is given.
std::vector<SoftmaxProfile> averaged_softmax_profiles(const std::optional<Network>& net, const RoiSet& rois,
                                                      const std::vector<int>& members);

struct Grouping {
  /// Groups of member positions; each sorted, ordered by first element.
  std::vector<std::vector<std::size_t>> groups;
  std::vector<std::vector<double>> similarity;
  bool forced_split = false;
};

/// cross[a][b] is the mass member a's profile puts on member b. Edges join
/// pairs whose symmetrized membership is >= 0.5; groups are connected
/// components. A single all-member component is split by dropping the
/// weakest edges (all ties at once) until at least two groups remain.
Grouping group_categories(const std::vector<std::vector<double>>& cross, const MembershipParams& p);

struct TreeNode {
  std::size_t id = 0;
  int parent = -1;
  std::vector<int> members;  // sorted category indices
  std::vector<std::size_t> children;
  Shape input_shape;
  std::size_t conv_depth = 0;
  std::optional<Network> net;         // internal nodes only
  std::optional<Network> member_net;  // flat classifier used for grouping
  bool trained = false;
  bool degenerate = false;
  nlohmann::json audit = nlohmann::json::object();

  bool is_leaf() const { return children.empty(); }
  bool is_root() const { return parent < 0; }
  /// Classes of the node network: one per child, plus background at the root.
  std::size_t class_count() const { return children.size() + (is_root() ? 1 : 0); }
};

struct Hierarchy {
  std::vector<TreeNode> nodes;  // nodes[0] is the root
  CategorySet categories;
  Rpn rpn;
  std::size_t pool = 7;

  const TreeNode& root() const { return nodes.at(0); }
  /// Position in node.children of the child whose members contain category.
  std::size_t child_slot(const TreeNode& node, int category) const;
  /// Root-to-leaf node ids ending at the leaf holding category.
  std::vector<std::size_t> path_to(int category) const;
  /// Internal levels on the longest root-to-leaf path.
  std::size_t depth() const;
  double average_branching() const;
  std::size_t internal_count() const;

  /// Nested member names, e.g. [["disc","disc-dot"],"wedge"].
  nlohmann::json partition() const;
  /// Throws HierarchyError when children do not partition their parent, a
  /// leaf is not a single category or a non-leaf has fewer than two children.
  void validate() const;
};

struct BuildConfig {
  SearchConfig search;
  TrainConfig train;
  RoiSampling sampling;
  std::optional<MembershipParams> membership;  // default: per node
  double profile_holdout = 0.2;                // images kept out of member-net training
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> checkpoint_dir;  // member nets are reused from here
};

/// Recursive build: per node, depth search, flat member classifier, softmax
/// profiles, grouping, and children fed by the member net's trunk. Node
/// networks are created but left untrained (see train_tree).
Hierarchy build_hierarchy(const DatasetManifest& data, const Rpn& rpn, const BuildConfig& cfg);

/// Same pipeline with the grouping taken from a nested partition of category
/// names or indices (a JSON array, or an object with a "groups" array).
Hierarchy build_hierarchy_from_partition(const DatasetManifest& data, const Rpn& rpn, const nlohmann::json& partition,
                                         const BuildConfig& cfg);

/// Root-down training. The root sees pooled RPN features with classes
/// {child groups, background}; every other node sees its trained parent's
/// trunk output on RoIs labeled inside its members. Trunks start from the
/// member nets when available. A node without RoIs is marked degenerate.
void train_tree(Hierarchy& h, const DatasetManifest& data, const TrainConfig& cfg, const RoiSampling& sampling,
                std::uint64_t seed);

/// Directory layout: tree.json, rpn.hcnt, node_<id>.hcnt per trained node.
void save_hierarchy(const std::filesystem::path& dir, const Hierarchy& h);
Hierarchy load_hierarchy(const std::filesystem::path& dir);

}  // namespace hcount
