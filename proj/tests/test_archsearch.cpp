#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>

#include "hcount/archsearch.hpp"
#include "hcount/rng.hpp"
#include "oracles.hpp"

using namespace hcount;

namespace {

struct Table {
  std::vector<double> map, memory;  // index 0 is depth 1
};

std::size_t simulate(const Table& t, double threshold, std::size_t max_depth) {
  return oracle::depth_loop_simulation(t.map, t.memory, threshold, max_depth);
}

CandidateEvaluator scripted(const Table& t, std::vector<std::size_t>* calls = nullptr) {
  return [&t, calls](std::size_t depth) {
    if (calls) calls->push_back(depth);
    return CandidateRecord{depth, t.map.at(depth - 1), t.memory.at(depth - 1)};
  };
}

}  // namespace

TEST_CASE("delta_id examples") {
  CHECK(delta_id({1, 0.50, 2.0}, {2, 0.58, 6.0}) == doctest::Approx(0.02).epsilon(1e-12));
  CHECK(delta_id({1, 0.4, 1.0}, {2, 0.4, 3.0}) == 0.0);
  const double tiny = delta_id({1, 0.60, 10}, {2, 0.6005, 20});
  CHECK(tiny == doctest::Approx(0.00005).epsilon(1e-6));
  CHECK(tiny <= 0.001);
  CHECK(delta_id({1, 0.6, 1}, {2, 0.5, 2}) < 0);
  CHECK_THROWS_AS(delta_id({1, 0.5, 2}, {2, 0.6, 2}), std::domain_error);
  // Memory units matter: scaling both memories by k scales the ratio by 1/k.
  CHECK(delta_id({1, 0.5, 2e3}, {2, 0.58, 6e3}) == doctest::Approx(0.02 / 1e3));
}

TEST_CASE("depth loop on the worked tables") {
  const Table rising{{0.50, 0.58, 0.60, 0.6005}, {2, 6, 10, 20}};
  CHECK(select_depth(scripted(rising), {}).selected_depth == 3);

  // Exactly at the threshold the loop stops.
  const Table boundary{{0.0, 1.0, 1.0}, {1000, 2000, 3000}};
  REQUIRE(delta_id({1, 0.0, 1000}, {2, 1.0, 2000}) == 0.001);
  const auto trace = select_depth(scripted(boundary), {});
  CHECK(trace.selected_depth == 1);
  REQUIRE(trace.steps.size() == 1);
  CHECK_FALSE(trace.steps[0].advance);

  SearchConfig never;
  never.threshold = std::numeric_limits<double>::infinity();
  CHECK(select_depth(scripted(rising), never).selected_depth == 1);

  SearchConfig always;
  always.threshold = 0;
  always.max_depth = 4;
  const auto deep = select_depth(scripted(rising), always);
  CHECK(deep.selected_depth == 4);
  CHECK(deep.reached_max_depth);

  SearchConfig one;
  one.max_depth = 1;
  std::vector<std::size_t> calls;
  CHECK(select_depth(scripted(rising, &calls), one).selected_depth == 1);
  CHECK(calls.empty());
}

TEST_CASE("depth loop matches the hand simulation on scripted tables") {
  Rng rng(11);
  int boundary_cases = 0;
  for (int t = 0; t < 50; ++t) {
    const std::size_t max_depth = 1 + rng.below(6);
    Table table;
    double a = rng.uniform(0.1, 0.5), m = rng.uniform(0.005, 2.0);
    for (std::size_t d = 0; d < max_depth + 1; ++d) {
      table.map.push_back(a);
      table.memory.push_back(m);
      const double dm = rng.uniform(0.005, 1.0);
      const auto kind = rng.below(4);
      m += dm;
      if (kind == 0) {
        a += 0.001 * dm;  // at (or rounding next to) the threshold
      } else if (kind == 1) {
        a -= rng.uniform(0, 0.01);
      } else {
        a += rng.uniform(0, 0.05);
      }
    }
    // Force one exact boundary step in every fifth table.
    if (t % 5 == 0 && max_depth >= 2) {
      const std::size_t d = rng.below(max_depth - 1) + 1;
      table.map[d] = table.map[d - 1] + 1.0;
      table.memory[d] = table.memory[d - 1] + 1000.0;
      for (std::size_t k = d + 1; k < table.memory.size(); ++k) table.memory[k] += 1000.0;
      if ((table.map[d] - table.map[d - 1]) / (table.memory[d] - table.memory[d - 1]) == 0.001) ++boundary_cases;
    }
    std::vector<std::size_t> calls;
    SearchConfig cfg;
    cfg.max_depth = max_depth;
    const auto trace = select_depth(scripted(table, &calls), cfg);
    CHECK(trace.selected_depth == simulate(table, 0.001, max_depth));
    CHECK(calls.size() == std::set<std::size_t>(calls.begin(), calls.end()).size());
    for (auto c : calls) CHECK(c <= max_depth);
    CHECK(trace.steps.size() <= max_depth);
  }
  CHECK(boundary_cases >= 5);
}

TEST_CASE("search trace serializes every step") {
  const Table rising{{0.50, 0.58, 0.60, 0.6005}, {2, 6, 10, 20}};
  SearchConfig cfg;
  cfg.max_depth = 4;
  const auto j = select_depth(scripted(rising), cfg).to_json();
  CHECK(j.at("selected_depth") == 3);
  CHECK(j.at("threshold") == 0.001);
  REQUIRE(j.at("steps").size() == 3);
  CHECK(j.at("steps")[0].at("decision") == "advance");
  CHECK(j.at("steps")[2].at("decision") == "stop");
  CHECK(j.at("steps")[2].at("next").at("memory_mb") == 20.0);
}

TEST_CASE("extrapolation") {
  CHECK(extrapolate_map({0.4, 0.4, 0.4, 0.4, 0.4}, 20) == 0.4);
  std::vector<double> curve;
  for (int e = 1; e <= 5; ++e) curve.push_back(0.8 - 0.5 * std::pow(e, -1.0));
  CHECK(std::abs(extrapolate_map(curve, 20) - 0.775) <= 0.02);
  CHECK(extrapolate_map({0.6, 0.5, 0.45, 0.4, 0.3}, 20) == 0.3);
  CHECK(extrapolate_map({0.2, std::nan(""), 0.3}, 20) == 0.3);
  CHECK_THROWS(extrapolate_map({0.1, 0.2}, 20));

  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    const double c = rng.uniform(0.3, 1.0), alpha = rng.uniform(0.05, 0.3), beta = rng.uniform(0.2, 2.0);
    std::vector<double> h;
    for (int e = 1; e <= 5; ++e) h.push_back(c - alpha * std::pow(e, -beta));
    const double truth = c - alpha * std::pow(20.0, -beta);
    const double est = extrapolate_map(h, 20);
    CHECK(est >= h.back());
    CHECK(est <= 1.0);
    CHECK(std::abs(est - truth) <= 0.02);
  }
}

TEST_CASE("stratified subsets") {
  DatasetConfig dc;
  dc.num_images = 100;
  const auto data = generate_dataset(3, dc);
  CHECK(sample_subset(data, 1.0, 1) == data);
  const auto half = sample_subset_indices(data, 0.5, 7);
  CHECK(half.size() == 50);
  CHECK(half == sample_subset_indices(data, 0.5, 7));
  CHECK(half != sample_subset_indices(data, 0.5, 8));
  CHECK(std::is_sorted(half.begin(), half.end()));
  CHECK_THROWS(sample_subset(data, 0.0, 1));
  CHECK_THROWS(sample_subset(data, 1.5, 1));

  // Category census: every category in the full set survives at >= 25%.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    DatasetConfig sparse = dc;
    sparse.num_images = 40;
    sparse.max_objects = 1;
    const auto small = generate_dataset(seed, sparse);
    const auto sub = sample_subset(small, 0.25, seed);
    std::set<int> full_cats, sub_cats;
    for (const auto& s : small.samples)
      for (const auto& a : s.annotations) full_cats.insert(a.category);
    for (const auto& s : sub.samples)
      for (const auto& a : s.annotations) sub_cats.insert(a.category);
    CHECK(sub_cats == full_cats);
    CHECK(sub.samples.size() == 10);
  }
}

TEST_CASE("node mAP scores perfect and blind classifiers") {
  // One image, two truths of classes 0 and 1, RoIs exactly on them.
  NodeData data;
  data.classes = 3;
  data.background = 2;
  data.eval.shape = {1, 1, 1};
  data.eval.push(std::vector<float>{1.0f}, 0, 0, {0, 0, 10, 10});
  data.eval.push(std::vector<float>{-1.0f}, 1, 0, {20, 20, 30, 30});
  data.eval_truths = {{{{0, 0, 10, 10}, 0}, {{20, 20, 30, 30}, 1}}};
  // linear: logit0 = 5x, logit1 = -5x, logit_bg = 0
  NetworkSpec spec{{1, 1, 1}, {LayerSpec::linear(3), LayerSpec::softmax()}};
  Network net(spec, 1);
  auto& p = net.mutable_params()[0];
  p.kernel.fill(0);
  p.bias.fill(0);
  p.kernel[0] = 5;
  p.kernel[1] = -5;
  CHECK(node_map(net, data) == 1.0);
  p.kernel[0] = -5;
  p.kernel[1] = 5;
  // Each class ranks the wrong RoI first: AP = 6/11 * 1/2 + 5/11 * 1/2... via the
  // running max, precision at recall 1 is 1/2 for both classes.
  CHECK(node_map(net, data) == doctest::Approx(0.5));
  data.eval_truths = {{}};
  CHECK(node_map(net, data) == 0.0);
}

TEST_CASE("architecture search on a toy node") {
  NodeData data;
  data.classes = 2;
  data.train.shape = data.eval.shape = {2, 4, 4};
  Rng rng(9);
  auto make = [&](RoiSet& set, std::size_t n, bool eval) {
    for (std::size_t i = 0; i < n; ++i) {
      const int label = static_cast<int>(i % 2);
      std::vector<float> f(set.volume());
      for (std::size_t k = 0; k < f.size(); ++k) f[k] = static_cast<float>(rng.normal() * 0.5 + (k < 16 ? (label ? 0.5 : -0.5) : 0.0));
      const BBox box{static_cast<double>(10 * i), 0, static_cast<double>(10 * i + 8), 8};
      set.push(f, label, 0, box);
      if (eval) {
        if (data.eval_truths.empty()) data.eval_truths.resize(1);
        data.eval_truths[0].push_back({box, label});
      }
    }
  };
  make(data.train, 80, false);
  make(data.eval, 40, true);
  data.train_targets = data.train.labels;
  TrainConfig train;
  train.initial_lr = 0.05;
  SearchConfig cfg;
  cfg.max_depth = 3;
  const auto a = select_architecture(data, cfg, train, 4);
  const auto b = select_architecture(data, cfg, train, 4);
  CHECK(a.spec == b.spec);
  CHECK(a.trace.to_json() == b.trace.to_json());
  CHECK(a.trace.selected_depth >= 1);
  CHECK(a.trace.selected_depth <= 3);
  CHECK(a.spec == node_spec(data.train.shape, a.trace.selected_depth, 2));
  for (const auto& s : a.trace.steps) CHECK(s.next.memory_mb > s.current.memory_mb);

  SearchConfig bad = cfg;
  bad.probe_epochs = 2;
  CHECK_THROWS(select_architecture(data, bad, train, 4));
  NodeData empty = data;
  empty.train = RoiSet{};
  empty.train.shape = data.train.shape;
  CHECK_THROWS(select_architecture(empty, cfg, train, 4));
}
