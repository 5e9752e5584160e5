#include "hcount/hierarchy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>

#include <spdlog/spdlog.h>

#include "hcount/model_io.hpp"
#include "hcount/rng.hpp"

namespace hcount {

MembershipParams MembershipParams::for_members(std::size_t n) {
  if (n == 0) throw std::invalid_argument("membership needs at least one member");
  const double c = 1.0 / static_cast<double>(n);
  return {10.0 / c, c};
}

void MembershipParams::validate() const {
  if (!(slope > 0)) throw std::invalid_argument("membership slope must be positive");
  if (!(center > 0 && center < 1)) throw std::invalid_argument("membership center must be in (0, 1)");
}

double membership(double x, const MembershipParams& p) { return 1.0 / (1.0 + std::exp(-p.slope * (x - p.center))); }

std::vector<SoftmaxProfile> averaged_softmax_profiles(const std::optional<Network>& net, const RoiSet& rois,
                                                      const std::vector<int>& members) {
  if (!net) throw std::logic_error("softmax profiles need a trained node network");
  const std::size_t classes = output_shape(net->spec())[0];
  if (classes < members.size()) throw std::invalid_argument("node network has fewer classes than members");
  std::vector<SoftmaxProfile> out(members.size());
  for (auto& p : out) p.mass.assign(classes, 0.0);
  std::vector<std::size_t> picked;
  for (std::size_t i = 0; i < rois.size(); ++i) {
    if (std::find(members.begin(), members.end(), rois.labels[i]) != members.end()) picked.push_back(i);
  }
  if (!picked.empty()) {
    const Tensor probs = predict(*net, rois, picked);
    for (std::size_t r = 0; r < picked.size(); ++r) {
      const auto pos = static_cast<std::size_t>(std::find(members.begin(), members.end(), rois.labels[picked[r]]) - members.begin());
      auto& p = out[pos];
      for (std::size_t c = 0; c < classes; ++c) p.mass[c] += probs[r * classes + c];
      ++p.support;
    }
  }
  for (std::size_t m = 0; m < members.size(); ++m) {
    auto& p = out[m];
    if (p.support == 0) {
      spdlog::warn("category {} has no RoIs for its softmax profile; using a uniform profile", members[m]);
      p.mass.assign(classes, 1.0 / static_cast<double>(classes));
      continue;
    }
    double sum = 0;
    for (auto& v : p.mass) sum += (v /= static_cast<double>(p.support));
    for (auto& v : p.mass) v /= sum;  // float softmax rounding
  }
  return out;
}

namespace {

std::vector<std::vector<std::size_t>> components(std::size_t n, const std::vector<std::vector<bool>>& edge) {
  std::vector<int> comp(n, -1);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; ++s) {
    if (comp[s] >= 0) continue;
    std::vector<std::size_t> group{s}, stack{s};
    comp[s] = static_cast<int>(out.size());
    while (!stack.empty()) {
      const auto a = stack.back();
      stack.pop_back();
      for (std::size_t b = 0; b < n; ++b) {
        if (edge[a][b] && comp[b] < 0) {
          comp[b] = comp[s];
          group.push_back(b);
          stack.push_back(b);
        }
      }
    }
    std::sort(group.begin(), group.end());
    out.push_back(group);
  }
  return out;
}

}  // namespace

Grouping group_categories(const std::vector<std::vector<double>>& cross, const MembershipParams& p) {
  p.validate();
  const std::size_t n = cross.size();
  for (const auto& row : cross)
    if (row.size() != n) throw std::invalid_argument("cross-mass matrix must be square");
  Grouping g;
  g.similarity.assign(n, std::vector<double>(n, 1.0));
  std::vector<std::vector<bool>> edge(n, std::vector<bool>(n, false));
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      const double s = membership(0.5 * (cross[a][b] + cross[b][a]), p);
      g.similarity[a][b] = g.similarity[b][a] = s;
      edge[a][b] = edge[b][a] = s >= 0.5;
    }
  }
  g.groups = components(n, edge);
  while (n > 1 && g.groups.size() == 1) {
    g.forced_split = true;
    double weakest = 2;
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = a + 1; b < n; ++b)
        if (edge[a][b]) weakest = std::min(weakest, g.similarity[a][b]);
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = a + 1; b < n; ++b)
        if (edge[a][b] && g.similarity[a][b] == weakest) edge[a][b] = edge[b][a] = false;
    g.groups = components(n, edge);
  }
  return g;
}

std::size_t Hierarchy::child_slot(const TreeNode& node, int category) const {
  for (std::size_t k = 0; k < node.children.size(); ++k) {
    const auto& m = nodes.at(node.children[k]).members;
    if (std::binary_search(m.begin(), m.end(), category)) return k;
  }
  throw std::out_of_range("category " + std::to_string(category) + " is not under node " + std::to_string(node.id));
}

std::vector<std::size_t> Hierarchy::path_to(int category) const {
  if (category < 0 || static_cast<std::size_t>(category) >= categories.size()) {
    std::string names;
    for (const auto& n : categories.names) names += (names.empty() ? "" : ", ") + n;
    throw std::out_of_range("unknown category " + std::to_string(category) + "; valid: " + names);
  }
  std::vector<std::size_t> path{0};
  while (!nodes[path.back()].is_leaf()) {
    const auto& node = nodes[path.back()];
    path.push_back(node.children[child_slot(node, category)]);
  }
  return path;
}

std::size_t Hierarchy::depth() const {
  std::function<std::size_t(std::size_t)> rec = [&](std::size_t id) -> std::size_t {
    const auto& n = nodes.at(id);
    std::size_t d = 0;
    for (auto c : n.children) d = std::max(d, rec(c));
    return n.is_leaf() ? 0 : d + 1;
  };
  return nodes.empty() ? 0 : rec(0);
}

std::size_t Hierarchy::internal_count() const {
  return static_cast<std::size_t>(std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return !n.is_leaf(); }));
}

double Hierarchy::average_branching() const {
  std::size_t edges = 0;
  for (const auto& n : nodes) edges += n.children.size();
  const auto internal = internal_count();
  return internal == 0 ? 0.0 : static_cast<double>(edges) / static_cast<double>(internal);
}

nlohmann::json Hierarchy::partition() const {
  std::function<nlohmann::json(std::size_t)> rec = [&](std::size_t id) -> nlohmann::json {
    const auto& n = nodes.at(id);
    if (n.is_leaf()) return categories.names.at(static_cast<std::size_t>(n.members.at(0)));
    nlohmann::json out = nlohmann::json::array();
    for (auto c : n.children) out.push_back(rec(c));
    return out;
  };
  return rec(0);
}

void Hierarchy::validate() const {
  if (nodes.empty()) throw HierarchyError("hierarchy has no nodes");
  std::vector<int> all(categories.size());
  std::iota(all.begin(), all.end(), 0);
  if (root().members != all) throw HierarchyError("root must hold every category");
  std::vector<int> leaf_hits(categories.size(), 0);
  for (std::size_t id = 0; id < nodes.size(); ++id) {
    const auto& n = nodes[id];
    if (n.id != id) throw HierarchyError("node ids must match their position");
    if (!std::is_sorted(n.members.begin(), n.members.end())) throw HierarchyError("node members must be sorted");
    if (n.is_leaf()) {
      if (n.members.size() != 1) throw HierarchyError("leaf " + std::to_string(id) + " must hold exactly one category");
      ++leaf_hits.at(static_cast<std::size_t>(n.members[0]));
      continue;
    }
    if (n.children.size() < 2) throw HierarchyError("node " + std::to_string(id) + " has fewer than two children");
    std::vector<int> united;
    for (auto c : n.children) {
      if (c >= nodes.size() || nodes[c].parent != static_cast<int>(id)) throw HierarchyError("broken parent link");
      united.insert(united.end(), nodes[c].members.begin(), nodes[c].members.end());
    }
    std::sort(united.begin(), united.end());
    if (united != n.members) throw HierarchyError("children of node " + std::to_string(id) + " do not partition it");
  }
  for (std::size_t c = 0; c < leaf_hits.size(); ++c) {
    if (leaf_hits[c] != 1) throw HierarchyError("category " + categories.names[c] + " must appear in exactly one leaf");
  }
}

namespace {

// Nested grouping with category indices; arrays are internal nodes.
nlohmann::json canonical_partition(const nlohmann::json& in, const CategorySet& cats, std::vector<int>& seen) {
  if (in.is_string()) {
    int idx = -1;
    try {
      idx = cats.index_of(in.get<std::string>());
    } catch (const std::out_of_range& e) {
      throw HierarchyError(std::string("partition: ") + e.what());
    }
    ++seen.at(static_cast<std::size_t>(idx));
    return idx;
  }
  if (in.is_number_integer()) {
    const auto idx = in.get<long long>();
    if (idx < 0 || static_cast<std::size_t>(idx) >= cats.size()) {
      throw HierarchyError("partition: category index " + std::to_string(idx) + " out of range");
    }
    ++seen[static_cast<std::size_t>(idx)];
    return idx;
  }
  if (in.is_array()) {
    if (in.size() < 2) throw HierarchyError("partition: every group needs at least two entries");
    nlohmann::json out = nlohmann::json::array();
    for (const auto& e : in) out.push_back(canonical_partition(e, cats, seen));
    return out;
  }
  throw HierarchyError("partition: entries must be category names, indices or arrays");
}

std::vector<int> flatten(const nlohmann::json& p) {
  if (p.is_number_integer()) return {p.get<int>()};
  std::vector<int> out;
  for (const auto& e : p) {
    const auto sub = flatten(e);
    out.insert(out.end(), sub.begin(), sub.end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

RoiSet filter_labels(const RoiSet& set, const std::vector<int>& members) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (std::binary_search(members.begin(), members.end(), set.labels[i])) idx.push_back(i);
  }
  return set.select(idx);
}

std::string names_of(const CategorySet& cats, const std::vector<int>& members) {
  std::string out;
  for (auto m : members) out += (out.empty() ? "" : ",") + cats.names.at(static_cast<std::size_t>(m));
  return out;
}

// Features at one node's input: training RoIs and held-out proposals.
struct Level {
  RoiSet train;
  RoiSet eval;
};

struct Builder {
  const DatasetManifest& data;
  const BuildConfig& cfg;
  Hierarchy h;
  std::vector<bool> profile_image;
  std::vector<std::size_t> probe_images;  // sorted
  std::vector<std::size_t> eval_images;   // eval slot -> image
  std::uint64_t checksum = 0;

  std::size_t build(const std::vector<int>& members, int parent, Level level, const nlohmann::json* spec);
  Network member_network(std::size_t id, const std::vector<int>& members, const NodeData& node, nlohmann::json& audit);
};

Network Builder::member_network(std::size_t id, const std::vector<int>& members, const NodeData& node,
                                nlohmann::json& audit) {
  const nlohmann::json key = {{"members", members},
                              {"seed", cfg.seed},
                              {"data", checksum},
                              {"threshold", cfg.search.threshold},
                              {"max_depth", cfg.search.max_depth},
                              {"probe_epochs", cfg.search.probe_epochs},
                              {"subsample", cfg.search.subsample_fraction},
                              {"epochs", cfg.train.epochs},
                              {"lr", cfg.train.initial_lr}};
  std::optional<std::filesystem::path> file;
  if (cfg.checkpoint_dir) {
    file = *cfg.checkpoint_dir / ("member_" + std::to_string(id) + ".hcnt");
    if (std::filesystem::exists(*file)) {
      try {
        ModelFile m = load_model(*file);
        if (m.sections.value("key", nlohmann::json()) == key) {
          spdlog::info("node {}: reusing member network from {}", id, file->string());
          audit["search"] = m.sections.at("search");
          return std::move(m.net);
        }
      } catch (const std::exception& e) {
        spdlog::warn("node {}: ignoring unreadable checkpoint: {}", id, e.what());
      }
    }
  }

  NodeData search = node;
  search.train = node.train.select(node.train.from_images(probe_images));
  search.train_targets.clear();
  for (std::size_t i = 0; i < node.train.size(); ++i) {
    if (std::binary_search(probe_images.begin(), probe_images.end(), static_cast<std::size_t>(node.train.image[i]))) {
      search.train_targets.push_back(node.train_targets[i]);
    }
  }
  std::size_t depth = 1;
  const bool searchable =
      std::any_of(search.train_targets.begin(), search.train_targets.end(), [](int t) { return t >= 0; });
  if (searchable) {
    const auto choice = select_architecture(search, cfg.search, cfg.train, derive_seed(cfg.seed, "search", id));
    depth = choice.trace.selected_depth;
    audit["search"] = choice.trace.to_json();
  } else {
    spdlog::warn("node {}: no probe RoIs; using depth 1", id);
    audit["search"] = {{"selected_depth", 1}, {"steps", nlohmann::json::array()}};
  }
  spdlog::info("node {} ({}): depth {}", id, names_of(h.categories, members), depth);

  Network net(node_spec(node.train.shape, depth, node.classes), derive_seed(cfg.seed, "member/init", id));
  std::vector<int> targets = node.train_targets;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (profile_image[node.train.image[i]]) targets[i] = -1;
  }
  train_classifier(net, node.train, targets, cfg.train, derive_seed(cfg.seed, "member/train", id));
  if (file) {
    std::filesystem::create_directories(file->parent_path());
    save_model(*file, net, {{"key", key}, {"search", audit["search"]}});
  }
  return net;
}

std::size_t Builder::build(const std::vector<int>& members, int parent, Level level, const nlohmann::json* spec) {
  const std::size_t id = h.nodes.size();
  {
    TreeNode node;
    node.id = id;
    node.parent = parent;
    node.members = members;
    node.input_shape = level.train.shape;
    h.nodes.push_back(std::move(node));
  }
  if (members.size() == 1) return id;
  const bool root = parent < 0;
  nlohmann::json audit = {{"members", names_of(h.categories, members)}};

  // Member classifier over individual categories.
  NodeData node;
  node.classes = members.size() + (root ? 1 : 0);
  node.background = root ? static_cast<int>(members.size()) : -1;
  auto position = [&](int label) -> int {
    const auto it = std::lower_bound(members.begin(), members.end(), label);
    if (it != members.end() && *it == label) return static_cast<int>(it - members.begin());
    return label == kBackground && root ? node.background : -1;
  };
  node.train = level.train;
  for (auto l : level.train.labels) node.train_targets.push_back(position(l));
  node.eval = level.eval;
  node.eval_truths.resize(eval_images.size());
  for (std::size_t slot = 0; slot < eval_images.size(); ++slot) {
    for (const auto& a : data.samples[eval_images[slot]].annotations) {
      const int pos = position(a.category);
      if (pos >= 0 && pos != node.background) node.eval_truths[slot].push_back({a.box, pos});
    }
  }
  Network member = member_network(id, members, node, audit);
  const auto& layers = member.spec().layers;
  const auto depth = static_cast<std::size_t>(
      std::count_if(layers.begin(), layers.end(), [](const LayerSpec& l) { return l.kind == LayerKind::Conv3; }));

  // Softmax profiles on held-out images.
  std::vector<std::size_t> held;
  for (std::size_t i = 0; i < level.train.size(); ++i)
    if (profile_image[level.train.image[i]]) held.push_back(i);
  const std::optional<Network> member_opt(member);
  const auto profiles = averaged_softmax_profiles(member_opt, level.train.select(held), members);
  std::vector<std::vector<double>> cross(members.size(), std::vector<double>(members.size()));
  nlohmann::json profile_json = nlohmann::json::object();
  for (std::size_t a = 0; a < members.size(); ++a) {
    for (std::size_t b = 0; b < members.size(); ++b) cross[a][b] = profiles[a].mass[b];
    profile_json[h.categories.names[static_cast<std::size_t>(members[a])]] = {{"mass", profiles[a].mass},
                                                                              {"support", profiles[a].support}};
  }
  audit["profiles"] = profile_json;

  std::vector<std::vector<int>> groups;
  std::vector<const nlohmann::json*> group_specs;
  if (spec) {
    std::vector<std::pair<std::vector<int>, const nlohmann::json*>> parts;
    for (const auto& e : *spec) parts.emplace_back(flatten(e), &e);
    std::sort(parts.begin(), parts.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (auto& [g, s] : parts) {
      groups.push_back(g);
      group_specs.push_back(s);
    }
    audit["grouping"] = "partition";
  } else {
    const MembershipParams params = cfg.membership.value_or(MembershipParams::for_members(members.size()));
    const Grouping g = group_categories(cross, params);
    for (const auto& grp : g.groups) {
      std::vector<int> cats;
      for (auto pos : grp) cats.push_back(members[pos]);
      groups.push_back(cats);
      group_specs.push_back(nullptr);
    }
    audit["grouping"] = "softmax-similarity";
    audit["membership"] = {{"slope", params.slope}, {"center", params.center}};
    audit["similarity"] = g.similarity;
    audit["forced_split"] = g.forced_split;
  }
  nlohmann::json group_names = nlohmann::json::array();
  for (const auto& g : groups) group_names.push_back(names_of(h.categories, g));
  audit["groups"] = group_names;

  std::vector<std::size_t> children;
  for (std::size_t k = 0; k < groups.size(); ++k) {
    Level child;
    if (groups[k].size() > 1) {
      child.train = run_node(member, filter_labels(level.train, groups[k])).trunk;
      child.eval = run_node(member, filter_labels(level.eval, groups[k])).trunk;
    } else {
      child.train.shape = child.eval.shape = trunk_output_shape(member.spec());
    }
    children.push_back(build(groups[k], static_cast<int>(id), std::move(child), group_specs[k]));
  }
  auto& n = h.nodes[id];
  n.children = children;
  n.conv_depth = depth;
  n.net = Network(node_spec(n.input_shape, depth, n.class_count()), derive_seed(cfg.seed, "node/init", id));
  n.member_net = std::move(member);
  n.audit = audit;
  return id;
}

Hierarchy build_impl(const DatasetManifest& data, const Rpn& rpn, const BuildConfig& cfg, const nlohmann::json* spec) {
  cfg.search.validate();
  if (data.categories.size() < 2) throw HierarchyError("a hierarchy needs at least two categories");
  if (data.samples.empty()) throw HierarchyError("hierarchy training split is empty");
  if (!(cfg.profile_holdout > 0 && cfg.profile_holdout < 1)) throw std::invalid_argument("profile_holdout must be in (0, 1)");
  if (cfg.membership) cfg.membership->validate();

  Builder b{data, cfg, {}, {}, {}, {}, dataset_checksum(data)};
  b.h.categories = data.categories;
  b.h.rpn = rpn;
  b.h.pool = cfg.sampling.pool;

  const std::size_t n = data.samples.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng(derive_seed(cfg.seed, "profile/holdout")).shuffle(order.begin(), order.end());
  b.profile_image.assign(n, false);
  const auto held = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cfg.profile_holdout * static_cast<double>(n))));
  for (std::size_t i = 0; i < held && i < n; ++i) b.profile_image[order[i]] = true;

  auto sub = sample_subset_indices(data, cfg.search.subsample_fraction, derive_seed(cfg.seed, "search/subset"));
  Rng(derive_seed(cfg.seed, "search/holdout")).shuffle(sub.begin(), sub.end());
  const auto eval_count = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(cfg.search.holdout_fraction * static_cast<double>(sub.size()))), 1, sub.size());
  b.eval_images.assign(sub.begin(), sub.begin() + static_cast<std::ptrdiff_t>(eval_count));
  std::sort(b.eval_images.begin(), b.eval_images.end());
  b.probe_images.assign(sub.begin() + static_cast<std::ptrdiff_t>(eval_count), sub.end());
  std::sort(b.probe_images.begin(), b.probe_images.end());

  Level root;
  root.train = collect_training_rois(rpn, data, cfg.sampling, derive_seed(cfg.seed, "build/rois"));
  DatasetManifest eval_data;
  eval_data.categories = data.categories;
  eval_data.config = data.config;
  for (auto i : b.eval_images) eval_data.samples.push_back(data.samples[i]);
  root.eval = collect_proposal_rois(rpn, eval_data, cfg.sampling);
  spdlog::info("building hierarchy: {} training RoIs, {} held-out proposals", root.train.size(), root.eval.size());

  std::vector<int> all(data.categories.size());
  std::iota(all.begin(), all.end(), 0);
  b.build(all, -1, std::move(root), spec);
  b.h.validate();
  return std::move(b.h);
}

}  // namespace

Hierarchy build_hierarchy(const DatasetManifest& data, const Rpn& rpn, const BuildConfig& cfg) {
  return build_impl(data, rpn, cfg, nullptr);
}

Hierarchy build_hierarchy_from_partition(const DatasetManifest& data, const Rpn& rpn, const nlohmann::json& partition,
                                         const BuildConfig& cfg) {
  const nlohmann::json& groups = partition.is_object() ? partition.at("groups") : partition;
  if (!groups.is_array()) throw HierarchyError("partition must be an array of groups");
  std::vector<int> seen(data.categories.size(), 0);
  const nlohmann::json canonical = canonical_partition(groups, data.categories, seen);
  for (std::size_t c = 0; c < seen.size(); ++c) {
    if (seen[c] == 0) throw HierarchyError("partition is missing category " + data.categories.names[c]);
    if (seen[c] > 1) throw HierarchyError("partition repeats category " + data.categories.names[c]);
  }
  return build_impl(data, rpn, cfg, &canonical);
}

void train_tree(Hierarchy& h, const DatasetManifest& data, const TrainConfig& cfg, const RoiSampling& sampling,
                std::uint64_t seed) {
  h.validate();
  std::vector<std::optional<RoiSet>> inputs(h.nodes.size());
  inputs[0] = collect_training_rois(h.rpn, data, sampling, derive_seed(seed, "tree/rois"));
  // Ids grow with depth-first creation, so parents precede children.
  for (std::size_t id = 0; id < h.nodes.size(); ++id) {
    auto& node = h.nodes[id];
    if (node.is_leaf()) continue;
    node.trained = false;
    node.degenerate = false;
    if (!inputs[id]) {
      node.degenerate = true;
      node.net.reset();
      continue;
    }
    const RoiSet& in = *inputs[id];
    std::vector<int> targets;
    for (auto l : in.labels) {
      if (l == kBackground) {
        targets.push_back(node.is_root() ? static_cast<int>(node.children.size()) : -1);
      } else if (std::binary_search(node.members.begin(), node.members.end(), l)) {
        targets.push_back(static_cast<int>(h.child_slot(node, l)));
      } else {
        targets.push_back(-1);
      }
    }
    if (std::none_of(targets.begin(), targets.end(), [](int t) { return t >= 0; })) {
      spdlog::warn("node {} has no training RoIs; marked degenerate", id);
      node.degenerate = true;
      node.net.reset();
      inputs[id].reset();
      continue;
    }
    node.input_shape = in.shape;
    const std::size_t depth = std::max<std::size_t>(node.conv_depth, 1);
    Network net(node_spec(in.shape, depth, node.class_count()), derive_seed(seed, "tree/init", id));
    if (node.member_net && node.member_net->spec().input_shape == in.shape) {
      const std::size_t trunk = trunk_length(net.spec());
      if (trunk == trunk_length(node.member_net->spec())) {
        auto& dst = net.mutable_params();
        const auto& src = node.member_net->params();
        for (std::size_t l = 0; l < trunk; ++l) dst[l] = src[l];
      }
    }
    const auto losses = train_classifier(net, in, targets, cfg, derive_seed(seed, "tree/train", id));
    spdlog::info("node {} trained: loss {:.4f} -> {:.4f} on {} RoIs", id, losses.front(), losses.back(), in.size());
    for (auto c : node.children) {
      if (h.nodes[c].is_leaf()) continue;
      const RoiSet sub = filter_labels(in, h.nodes[c].members);
      if (sub.size() > 0) inputs[c] = run_node(net, sub).trunk;
    }
    node.net = std::move(net);
    node.trained = true;
    inputs[id].reset();
  }
}

namespace {

nlohmann::json node_to_json(const TreeNode& n) {
  return {{"id", n.id},
          {"parent", n.parent},
          {"members", n.members},
          {"children", n.children},
          {"input_shape", n.input_shape},
          {"conv_depth", n.conv_depth},
          {"trained", n.trained},
          {"degenerate", n.degenerate},
          {"model", n.trained && n.net ? nlohmann::json("node_" + std::to_string(n.id) + ".hcnt") : nlohmann::json()},
          {"member_model", n.member_net ? nlohmann::json("member_" + std::to_string(n.id) + ".hcnt") : nlohmann::json()},
          {"audit", n.audit}};
}

}  // namespace

void save_hierarchy(const std::filesystem::path& dir, const Hierarchy& h) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["format"] = "hcount-tree";
  j["version"] = 1;
  j["pool"] = h.pool;
  j["categories"] = category_set_to_json(h.categories);
  j["depth"] = h.depth();
  j["average_branching"] = h.average_branching();
  j["partition"] = h.partition();
  j["nodes"] = nlohmann::json::array();
  for (const auto& n : h.nodes) {
    j["nodes"].push_back(node_to_json(n));
    if (n.trained && n.net) save_model(dir / ("node_" + std::to_string(n.id) + ".hcnt"), *n.net);
    if (n.member_net) save_model(dir / ("member_" + std::to_string(n.id) + ".hcnt"), *n.member_net);
  }
  save_rpn(dir / "rpn.hcnt", h.rpn);
  std::ofstream out(dir / "tree.json");
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("cannot write " + (dir / "tree.json").string());
}

Hierarchy load_hierarchy(const std::filesystem::path& dir) {
  const auto path = dir / "tree.json";
  std::ifstream in(path);
  if (!in) throw HierarchyError("missing tree file " + path.string());
  Hierarchy h;
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.at("format") != "hcount-tree") throw HierarchyError(path.string() + ": not a tree file");
    h.pool = j.at("pool");
    h.categories = category_set_from_json(j.at("categories"));
    for (const auto& nj : j.at("nodes")) {
      TreeNode n;
      n.id = nj.at("id");
      n.parent = nj.at("parent");
      n.members = nj.at("members").get<std::vector<int>>();
      n.children = nj.at("children").get<std::vector<std::size_t>>();
      n.input_shape = nj.at("input_shape").get<Shape>();
      n.conv_depth = nj.at("conv_depth");
      n.trained = nj.at("trained");
      n.degenerate = nj.at("degenerate");
      n.audit = nj.at("audit");
      if (!nj.at("model").is_null()) n.net = load_model(dir / nj.at("model").get<std::string>()).net;
      if (!nj.at("member_model").is_null()) n.member_net = load_model(dir / nj.at("member_model").get<std::string>()).net;
      h.nodes.push_back(std::move(n));
    }
  } catch (const nlohmann::json::exception& e) {
    throw HierarchyError(path.string() + ": malformed tree file: " + e.what());
  }
  h.rpn = load_rpn(dir / "rpn.hcnt");
  h.validate();
  return h;
}

}  // namespace hcount
