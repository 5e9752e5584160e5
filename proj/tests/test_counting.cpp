#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "hcount/counting.hpp"

using namespace hcount;

namespace {

struct Fixture {
  DatasetManifest train, test;
  FlatDetector flat;
  Hierarchy tree;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture x;
    DatasetConfig dc;
    dc.num_images = 60;
    x.train = generate_dataset(31, dc, "train");
    dc.num_images = 12;
    x.test = generate_dataset(32, dc, "test");
    const Rpn rpn = make_rpn(RpnConfig{}, 2);
    TrainConfig tc;
    tc.epochs = 3;
    tc.initial_lr = 0.01;
    x.flat = train_flat_detector(rpn, x.train, tc, RoiSampling{}, 4);
    const auto cats = x.train.categories.families();
    nlohmann::json part = nlohmann::json::array();
    for (const auto& fam : cats) {
      if (fam.size() == 1) {
        part.push_back(fam[0]);
        continue;
      }
      part.push_back(fam);
    }
    BuildConfig bc;
    bc.seed = 3;
    bc.train = tc;
    bc.search.max_depth = 1;
    bc.search.probe_epochs = 3;
    x.tree = build_hierarchy_from_partition(x.train, rpn, part, bc);
    train_tree(x.tree, x.train, tc, bc.sampling, 5);
    return x;
  }();
  return f;
}

}  // namespace

TEST_CASE("queries resolve by name or index") {
  const auto cats = default_categories();
  CHECK(resolve_query(cats, "disc") == 0);
  CHECK(resolve_query(cats, "wedge-dot") == 7);
  CHECK(resolve_query(cats, "3") == 3);
  CHECK_THROWS_AS(resolve_query(cats, "8"), std::out_of_range);
  CHECK_THROWS_AS(resolve_query(cats, "-1"), std::out_of_range);
  CHECK_THROWS_AS(resolve_query(cats, "pyramid"), std::out_of_range);
  try {
    resolve_query(cats, "pyramid");
  } catch (const std::out_of_range& e) {
    CHECK(std::string(e.what()).find("block-bar") != std::string::npos);
  }
}

TEST_CASE("query paths stop above the leaf") {
  const auto& f = fixture();
  const Hierarchy flat_tree = as_depth_one(f.flat);
  for (int c = 0; c < 8; ++c) CHECK(query_path(flat_tree, c) == std::vector<std::size_t>{0});
  const auto path = query_path(f.tree, 0);
  CHECK(path.size() == 2);
  CHECK(path.front() == 0);
  CHECK_THROWS_AS(query_path(f.tree, 8), std::out_of_range);
}

TEST_CASE("depth-one tree counts exactly like the flat counter") {
  const auto& f = fixture();
  const Hierarchy h = as_depth_one(f.flat);
  const CountConfig cfg;
  std::size_t total = 0;
  for (const auto& s : f.test.samples) {
    for (int c = 0; c < 8; ++c) {
      const auto a = route_and_count(h, s.pixels, c, cfg);
      const auto b = flat_count(f.flat, s.pixels, c, cfg);
      CHECK(a.count == b.count);
      CHECK(a.cost.operations == b.cost.operations);
      CHECK(a.cost.path_memory_bytes == b.cost.path_memory_bytes);
      total += a.count;
    }
  }
  CHECK(total > 0);
}

TEST_CASE("routing only ever narrows the RoI set") {
  const auto& f = fixture();
  const CountConfig cfg;
  for (const auto& s : f.test.samples) {
    const ImagePass pass = prepare_image(f.tree.rpn, s.pixels, cfg, f.tree.pool);
    NodeCache cache;
    for (int c = 0; c < 8; ++c) {
      const auto r = route_and_count(f.tree, pass, c, cfg, &cache);
      const auto& stages = r.cost.rois_per_stage;
      REQUIRE(stages.size() == r.path.size() + 2);
      CHECK(stages.front() == pass.proposals.size());
      for (std::size_t i = 1; i < stages.size(); ++i) CHECK(stages[i] <= stages[i - 1]);
      CHECK(stages.back() == r.count);
      CHECK(r.surviving_boxes.size() == r.count);
      // Dynamic work never exceeds the static worst case.
      CHECK(r.cost.operations <= cost_report(f.tree, c, cfg).operations);
      // A cached pass agrees with an uncached one.
      CHECK(route_and_count(f.tree, pass, c, cfg).count == r.count);
    }
  }
}

TEST_CASE("no proposals or an all-background root counts zero") {
  const auto& f = fixture();
  CountConfig none;
  none.proposals = 0;
  const auto& img = f.test.samples[0].pixels;
  const auto r = route_and_count(f.tree, img, 0, none);
  CHECK(r.count == 0);
  CHECK(flat_count(f.flat, img, 0, none).count == 0);

  Hierarchy blind = f.tree;
  auto& root = *blind.nodes[0].net;
  for (auto& p : root.mutable_params()) {
    p.kernel.fill(0);
    p.bias.fill(0);
  }
  auto& params = root.mutable_params();
  const auto last = std::find_if(params.rbegin(), params.rend(), [](const auto& p) { return !p.empty(); });
  last->bias[blind.nodes[0].class_count() - 1] = 10;
  for (const auto& s : f.test.samples) {
    for (int c = 0; c < 8; ++c) {
      const auto b = route_and_count(blind, s.pixels, c, CountConfig{});
      CHECK(b.count == 0);
      CHECK(b.cost.rois_per_stage[1] == 0);
    }
  }
}

TEST_CASE("a degenerate node on the path reports zero") {
  const auto& f = fixture();
  Hierarchy h = f.tree;
  const auto path = query_path(h, 0);
  h.nodes[path.back()].degenerate = true;
  h.nodes[path.back()].trained = false;
  const auto r = route_and_count(h, f.test.samples[0].pixels, 0, CountConfig{});
  CHECK(r.degenerate);
  CHECK(r.count == 0);
}

TEST_CASE("static cost figures") {
  const auto& f = fixture();
  const CountConfig cfg;
  const auto flat = flat_cost_report(f.flat, cfg);
  CHECK(flat.path_memory_bytes == f.flat.rpn.memory_bytes() + param_memory(f.flat.classifier.spec()));
  const auto one = cost_report(as_depth_one(f.flat), 0, cfg);
  CHECK(one.operations == flat.operations);
  CHECK(one.path_memory_bytes == flat.path_memory_bytes);
  std::uint64_t longest = 0;
  for (int c = 0; c < 8; ++c) longest = std::max(longest, cost_report(f.tree, c, cfg).path_memory_bytes);
  CHECK(longest_path_memory(f.tree) == longest);
}

TEST_CASE("evaluation covers every image and category") {
  const auto& f = fixture();
  const CountConfig cfg;
  const auto eh = evaluate_hierarchy(f.tree, f.test, cfg);
  const auto ef = evaluate_flat(f.flat, f.test, cfg);
  REQUIRE(eh.records.size() == f.test.samples.size() * 8);
  CHECK(eh.records[0].id == f.test.samples[0].id);
  CHECK(eh.records[1].query == "disc-dot");
  CHECK(eh.records[8].id == f.test.samples[1].id);
  for (std::size_t i = 0; i < eh.records.size(); ++i) {
    const auto& s = f.test.samples[i / 8];
    const auto r = route_and_count(f.tree, s.pixels, static_cast<int>(i % 8), cfg);
    CHECK(eh.records[i].reported_count == r.count);
    CHECK(eh.records[i].ops == r.cost.operations);
  }
  CHECK(eh.summary.rmse >= 0);
  CHECK(ef.summary.map >= 0);
  CHECK(ef.summary.map <= 1);
  // The depth-one view of the flat detector evaluates identically.
  const auto e1 = evaluate_hierarchy(as_depth_one(f.flat), f.test, cfg);
  CHECK(e1.summary.rmse == ef.summary.rmse);
  CHECK(e1.summary.map == ef.summary.map);
  const auto j = eh.to_json();
  CHECK(j.at("records").size() == eh.records.size());
  CHECK(j.at("summary").contains("ratios"));
}

TEST_CASE("flat detector persists") {
  const auto& f = fixture();
  const auto dir = std::filesystem::temp_directory_path() / "hcount_test_flat";
  std::filesystem::remove_all(dir);
  save_flat_detector(dir, f.flat);
  const FlatDetector back = load_flat_detector(dir);
  CHECK(back.categories == f.flat.categories);
  CHECK(back.classifier.params() == f.flat.classifier.params());
  CHECK(back.pool == f.flat.pool);
  const auto& img = f.test.samples[1].pixels;
  for (int c = 0; c < 8; ++c) CHECK(flat_count(back, img, c, CountConfig{}).count == flat_count(f.flat, img, c, CountConfig{}).count);
  std::filesystem::remove_all(dir);
}
