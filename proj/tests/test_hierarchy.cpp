#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>

#include "hcount/hierarchy.hpp"
#include "hcount/rng.hpp"

using namespace hcount;

namespace {

// Two families of two. With zero detail contrast family members render
// identically.
CategorySet four_categories() {
  const CategorySet all = default_categories();
  CategorySet out;
  out.family_names = all.family_names;
  for (const char* name : {"disc", "disc-dot", "block", "block-dot"}) {
    const auto i = static_cast<std::size_t>(all.index_of(name));
    out.names.push_back(all.names[i]);
    out.family_of.push_back(all.family_of[i]);
    out.styles.push_back(all.styles[i]);
  }
  return out;
}

struct Fixture {
  DatasetManifest data;
  Rpn rpn;
  BuildConfig cfg;
  Hierarchy built;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture x;
    DatasetConfig dc;
    dc.num_images = 80;
    dc.detail_contrast = 0;
    dc.categories = four_categories();
    x.data = generate_dataset(21, dc);
    x.rpn = make_rpn(RpnConfig{}, 5);
    x.cfg.seed = 8;
    x.cfg.train.epochs = 12;
    x.cfg.train.initial_lr = 0.02;
    x.cfg.search.max_depth = 2;
    x.cfg.search.probe_epochs = 3;
    x.built = build_hierarchy(x.data, x.rpn, x.cfg);
    return x;
  }();
  return f;
}

std::vector<std::vector<double>> block_matrix(const std::vector<int>& group_of, double within) {
  const std::size_t n = group_of.size();
  std::vector<std::vector<double>> m(n, std::vector<double>(n, 0.0));
  for (std::size_t a = 0; a < n; ++a) {
    std::size_t size = 0;
    for (std::size_t b = 0; b < n; ++b) size += group_of[a] == group_of[b];
    for (std::size_t b = 0; b < n; ++b)
      m[a][b] = group_of[a] == group_of[b] ? (a == b ? 1.0 - within * static_cast<double>(size - 1) : within) : 0.0;
  }
  return m;
}

// Groups as sets of the labels they hold, for order-free comparison.
std::set<std::set<int>> as_sets(const Grouping& g, const std::vector<int>& labels) {
  std::set<std::set<int>> out;
  for (const auto& grp : g.groups) {
    std::set<int> s;
    for (auto i : grp) s.insert(labels[i]);
    out.insert(s);
  }
  return out;
}

}  // namespace

TEST_CASE("membership function") {
  const MembershipParams p{40, 0.2};
  CHECK(membership(0.2, p) == 0.5);
  CHECK(membership(1.0, p) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(membership(0.0, p) == doctest::Approx(3.3535e-4).epsilon(1e-3));
  double last = 0;
  for (double x = 0; x <= 1.0; x += 0.01) {
    const double m = membership(x, p);
    CHECK(m > last);
    last = m;
  }
  const auto d = MembershipParams::for_members(8);
  CHECK(d.center == 0.125);
  CHECK(d.slope == 80);
  CHECK(membership(d.center, d) == 0.5);
  CHECK_THROWS(MembershipParams{0, 0.2}.validate());
  CHECK_THROWS(MembershipParams{10, 1.0}.validate());
  CHECK_THROWS(MembershipParams::for_members(0));
}

TEST_CASE("grouping of diagonal and block confusion") {
  const auto p = MembershipParams::for_members(4);
  std::vector<std::vector<double>> eye(4, std::vector<double>(4, 0.0));
  for (std::size_t i = 0; i < 4; ++i) eye[i][i] = 1.0;
  const auto g = group_categories(eye, p);
  CHECK(g.groups.size() == 4);
  CHECK_FALSE(g.forced_split);

  const auto blocks = group_categories(block_matrix({0, 0, 1, 1}, 0.4), p);
  CHECK(blocks.groups == std::vector<std::vector<std::size_t>>{{0, 1}, {2, 3}});
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = 0; b < 4; ++b) CHECK(blocks.similarity[a][b] == blocks.similarity[b][a]);

  CHECK_THROWS(group_categories({{1.0, 0.0}, {0.0}}, p));
}

TEST_CASE("grouping recovers random planted partitions and is permutation equivariant") {
  Rng rng(17);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 3 + rng.below(8);
    const std::size_t k = 2 + rng.below(std::min<std::size_t>(n - 1, 4));
    std::vector<int> group_of(n);
    for (std::size_t i = 0; i < n; ++i) group_of[i] = static_cast<int>(i < k ? i : rng.below(k));
    // Each member confuses with its ring neighbours inside the group, so the
    // pairwise mass stays above 1/n however large the group.
    std::vector<std::vector<double>> cross(n, std::vector<double>(n, 0.0));
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < n; ++b)
        if (group_of[a] != group_of[b]) cross[a][b] = rng.uniform(0, 0.02);
    for (int grp = 0; grp < static_cast<int>(k); ++grp) {
      std::vector<std::size_t> ring;
      for (std::size_t i = 0; i < n; ++i)
        if (group_of[i] == grp) ring.push_back(i);
      for (std::size_t r = 0; ring.size() > 1 && r < ring.size(); ++r) {
        cross[ring[r]][ring[(r + 1) % ring.size()]] += 0.35;
        cross[ring[r]][ring[(r + ring.size() - 1) % ring.size()]] += 0.35;
      }
    }
    for (std::size_t a = 0; a < n; ++a) {
      double off = 0;
      for (std::size_t b = 0; b < n; ++b) off += a == b ? 0 : cross[a][b];
      cross[a][a] = std::max(0.0, 1.0 - off);
    }
    std::vector<int> labels(n);
    std::iota(labels.begin(), labels.end(), 0);
    const auto p = MembershipParams::for_members(n);
    const auto g = group_categories(cross, p);
    std::set<std::set<int>> planted;
    for (int grp = 0; grp < static_cast<int>(k); ++grp) {
      std::set<int> s;
      for (std::size_t i = 0; i < n; ++i)
        if (group_of[i] == grp) s.insert(static_cast<int>(i));
      planted.insert(s);
    }
    CHECK(as_sets(g, labels) == planted);

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm.begin(), perm.end());
    std::vector<std::vector<double>> permuted(n, std::vector<double>(n));
    std::vector<int> permuted_labels(n);
    for (std::size_t a = 0; a < n; ++a) {
      permuted_labels[a] = labels[perm[a]];
      for (std::size_t b = 0; b < n; ++b) permuted[a][b] = cross[perm[a]][perm[b]];
    }
    CHECK(as_sets(group_categories(permuted, p), permuted_labels) == as_sets(g, labels));
  }
}

TEST_CASE("a single all-member component is split at its weakest edges") {
  // Chain 0-1-2 with a weaker 1-2 link.
  const std::vector<std::vector<double>> cross{{0.4, 0.6, 0.0}, {0.6, 0.0, 0.4}, {0.0, 0.4, 0.6}};
  const auto g = group_categories(cross, MembershipParams{40, 0.2});
  CHECK(g.forced_split);
  CHECK(g.groups == std::vector<std::vector<std::size_t>>{{0, 1}, {2}});

  // Full uniform confusion: all edges tie and are removed together.
  const std::vector<std::vector<double>> uniform(3, std::vector<double>(3, 1.0 / 3));
  const auto u = group_categories(uniform, MembershipParams::for_members(3));
  CHECK(u.forced_split);
  CHECK(u.groups.size() == 3);
}

TEST_CASE("softmax profiles") {
  NetworkSpec spec{{1, 1, 1}, {LayerSpec::linear(3), LayerSpec::softmax()}};
  std::optional<Network> net(Network(spec, 2));
  RoiSet rois;
  rois.shape = {1, 1, 1};
  rois.push(std::vector<float>{0.3f}, 0, 0, {});
  rois.push(std::vector<float>{-1.0f}, 0, 0, {});
  rois.push(std::vector<float>{2.0f}, 2, 0, {});
  rois.push(std::vector<float>{0.5f}, kBackground, 0, {});
  const auto prof = averaged_softmax_profiles(net, rois, {0, 1, 2});
  REQUIRE(prof.size() == 3);
  CHECK(prof[0].support == 2);
  CHECK(prof[1].support == 0);
  CHECK(prof[2].support == 1);
  for (const auto& p : prof) CHECK(std::accumulate(p.mass.begin(), p.mass.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
  for (double v : prof[1].mass) CHECK(v == doctest::Approx(1.0 / 3));
  CHECK_THROWS_AS(averaged_softmax_profiles(std::nullopt, rois, {0, 1}), std::logic_error);
}

TEST_CASE("partitions are validated") {
  const auto& f = fixture();
  const auto bad = [&](const nlohmann::json& j) {
    CHECK_THROWS_AS(build_hierarchy_from_partition(f.data, f.rpn, j, f.cfg), HierarchyError);
  };
  bad(nlohmann::json::array({nlohmann::json::array({"disc", "disc-dot"}), "block"}));               // missing block-dot
  bad(nlohmann::json::array({nlohmann::json::array({"disc", "disc-dot"}), "block", "disc"}));       // repeated
  bad(nlohmann::json::array({nlohmann::json::array({"disc"}), "disc-dot", "block", "block-dot"}));  // singleton group
  bad(nlohmann::json::array({"disc", "disc-dot", "block", "pyramid"}));                          // unknown name
  bad(nlohmann::json::array({0, 1, 2, 9}));                                                      // bad index
  bad(nlohmann::json::object({{"groups", 3}}));
}

TEST_CASE("build groups identical renderings and satisfies the tree invariants") {
  const auto& f = fixture();
  const Hierarchy& h = f.built;
  CHECK_NOTHROW(h.validate());
  const auto& root = h.root();
  CHECK(root.members == std::vector<int>{0, 1, 2, 3});
  CHECK(root.children.size() >= 2);
  // Identical renderings share a first-level group; the families do not.
  CHECK(h.child_slot(root, 0) == h.child_slot(root, 1));
  CHECK(h.child_slot(root, 2) == h.child_slot(root, 3));
  CHECK(h.child_slot(root, 0) != h.child_slot(root, 2));
  CHECK(h.root().input_shape == Shape{16, 7, 7});
  for (const auto& n : h.nodes) {
    if (n.is_leaf()) {
      CHECK_FALSE(n.net.has_value());
      continue;
    }
    REQUIRE(n.net.has_value());
    CHECK(output_shape(n.net->spec())[0] == n.class_count());
    CHECK(n.audit.contains("search"));
    if (!n.is_root()) CHECK(n.input_shape == Shape{16, 3, 3});
  }
  CHECK_THROWS_AS(h.path_to(7), std::out_of_range);
  const auto path = h.path_to(3);
  CHECK(path.front() == 0);
  CHECK(h.nodes[path.back()].members == std::vector<int>{3});
}

TEST_CASE("explicit partition builds the requested tree") {
  const auto& f = fixture();
  const auto part = nlohmann::json::array({nlohmann::json::array({"disc", "block"}), nlohmann::json::array({1, 3})});
  const auto h = build_hierarchy_from_partition(f.data, f.rpn, part, f.cfg);
  CHECK(h.partition() == nlohmann::json::array({nlohmann::json::array({"disc", "block"}), nlohmann::json::array({"disc-dot", "block-dot"})}));
  CHECK(h.depth() == 2);
  CHECK(h.internal_count() == 3);
  CHECK(h.average_branching() == 2.0);
}

TEST_CASE("tree training is deterministic and persists") {
  const auto& f = fixture();
  TrainConfig tc = f.cfg.train;
  tc.epochs = 3;
  Hierarchy a = f.built, b = f.built;
  train_tree(a, f.data, tc, f.cfg.sampling, 12);
  train_tree(b, f.data, tc, f.cfg.sampling, 12);
  for (std::size_t i = 0; i < a.nodes.size(); ++i) {
    CHECK(a.nodes[i].trained == b.nodes[i].trained);
    if (a.nodes[i].net) CHECK(a.nodes[i].net->params() == b.nodes[i].net->params());
    if (!a.nodes[i].is_leaf()) CHECK(a.nodes[i].trained != a.nodes[i].degenerate);
  }
  // A child consumes exactly its parent's trunk output.
  for (const auto& n : a.nodes) {
    if (n.is_leaf() || n.is_root()) continue;
    const auto& parent = a.nodes[static_cast<std::size_t>(n.parent)];
    CHECK(n.net->spec().input_shape == trunk_output_shape(parent.net->spec()));
  }

  const auto dir = std::filesystem::temp_directory_path() / "hcount_test_tree";
  std::filesystem::remove_all(dir);
  save_hierarchy(dir, a);
  const Hierarchy back = load_hierarchy(dir);
  CHECK(back.partition() == a.partition());
  CHECK(back.categories == a.categories);
  REQUIRE(back.nodes.size() == a.nodes.size());
  for (std::size_t i = 0; i < a.nodes.size(); ++i) {
    CHECK(back.nodes[i].members == a.nodes[i].members);
    CHECK(back.nodes[i].trained == a.nodes[i].trained);
    if (a.nodes[i].net) CHECK(back.nodes[i].net->params() == a.nodes[i].net->params());
  }
  CHECK(back.rpn.net.params() == a.rpn.net.params());
  std::filesystem::remove(dir / "tree.json");
  CHECK_THROWS_AS(load_hierarchy(dir), HierarchyError);
  std::filesystem::remove_all(dir);
}
