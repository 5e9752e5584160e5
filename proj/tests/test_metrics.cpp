#include <doctest.h>

#include <cmath>

#include "hcount/metrics.hpp"
#include "oracles.hpp"

using namespace hcount;

TEST_CASE("rmse examples") {
  CHECK(rmse({1, 2, 3}, {1, 2, 3}) == 0.0);
  CHECK(rmse({0}, {3}) == 3.0);
  CHECK(rmse({1, 2, 4}, {1, 3, 2}) == doctest::Approx(1.29099).epsilon(1e-5));
  CHECK_THROWS_AS(rmse({}, {}), MetricError);
  CHECK_THROWS_AS(rmse({1}, {1, 2}), MetricError);
}

TEST_CASE("rmse agrees with a direct sum on random inputs") {
  Rng rng(1);
  for (int t = 0; t < 500; ++t) {
    const auto n = 1 + rng.below(30);
    std::vector<double> p, q;
    long double sq = 0;
    for (std::uint64_t i = 0; i < n; ++i) {
      p.push_back(static_cast<double>(rng.below(8)));
      q.push_back(static_cast<double>(rng.below(8)));
      sq += (p.back() - q.back()) * (p.back() - q.back());
    }
    CHECK(std::abs(rmse(p, q) - std::sqrt(static_cast<double>(sq / n))) <= 1e-9);
  }
}

TEST_CASE("mAP examples") {
  const std::vector<std::vector<Annotation>> one_truth{{{{0, 0, 10, 10}, 0}}};
  CHECK(mean_average_precision({{{{0, 0, 10, 10}, 0.9, 0}}}, one_truth) == 1.0);
  CHECK(mean_average_precision({{}}, one_truth) == 0.0);
  CHECK_THROWS_AS(mean_average_precision({{}}, {{}}), MetricError);

  // Ranked hit, miss, hit against two truths.
  const std::vector<bool> hits{true, false, true};
  const double expected = oracle::ap_staircase(hits, 2);
  CHECK(average_precision_11pt(hits, 2) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(expected == doctest::Approx((6 * 1.0 + 5 * (2.0 / 3.0)) / 11.0));
  const std::vector<std::vector<Annotation>> truths{{{{0, 0, 10, 10}, 0}, {{20, 20, 30, 30}, 0}}};
  const std::vector<std::vector<Detection>> dets{{{{0, 0, 10, 10}, 0.9, 0}, {{40, 40, 50, 50}, 0.8, 0}, {{20, 20, 30, 30}, 0.7, 0}}};
  CHECK(mean_average_precision(dets, truths) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("duplicate detections count once") {
  const std::vector<std::vector<Annotation>> truths{{{{0, 0, 10, 10}, 0}}};
  const std::vector<std::vector<Detection>> dets{{{{0, 0, 10, 10}, 0.9, 0}, {{0, 0, 10, 10}, 0.8, 0}}};
  CHECK(average_precision_11pt({true, false}, 1) == 1.0);
  CHECK(mean_average_precision(dets, truths) == 1.0);
}

TEST_CASE("11-point AP matches the staircase oracle") {
  Rng rng(2);
  for (int t = 0; t < 2000; ++t) {
    std::vector<bool> hits;
    std::size_t tp = 0;
    for (std::uint64_t i = 0; i < rng.below(20); ++i) {
      hits.push_back(rng.uniform() < 0.5);
      tp += hits.back();
    }
    const std::size_t truths = tp + rng.below(5);
    CHECK(std::abs(average_precision_11pt(hits, truths) - oracle::ap_staircase(hits, truths)) <= 1e-12);
  }
}

TEST_CASE("mAP matches the brute-force oracle on random scenes") {
  Rng rng(3);
  for (int t = 0; t < 300; ++t) {
    const auto images = 1 + rng.below(4);
    std::vector<std::vector<Annotation>> truths(images);
    std::vector<std::vector<Detection>> dets(images);
    std::vector<std::vector<oracle::OracleDetection>> odets(images);
    bool any = false;
    for (std::uint64_t i = 0; i < images; ++i) {
      for (std::uint64_t k = 0; k < rng.below(4); ++k) {
        truths[i].push_back({oracle::random_int_box(rng, 20), static_cast<int>(rng.below(3))});
        any = true;
      }
      for (std::uint64_t k = 0; k < rng.below(6); ++k) {
        BBox b = !truths[i].empty() && rng.uniform() < 0.6 ? truths[i][rng.below(truths[i].size())].box
                                                           : oracle::random_int_box(rng, 20);
        b.x_max += static_cast<double>(rng.below(3));
        const double score = std::round(rng.uniform() * 4) / 4;  // ties on purpose
        const int cat = static_cast<int>(rng.below(3));
        dets[i].push_back({b, score, cat});
        odets[i].push_back({b, score, cat});
      }
    }
    if (!any) continue;
    CHECK(std::abs(mean_average_precision(dets, truths) - oracle::map_brute(odets, truths, 0.5)) <= 1e-6);
  }
}

TEST_CASE("normalized count ratio") {
  const std::vector<std::size_t> truth{0, 1, 2, 2, 3};
  CHECK(normalized_count_ratio(truth, truth) == std::map<std::size_t, double>{{1, 1.0}, {2, 1.0}, {3, 1.0}});
  const auto zero = normalized_count_ratio(truth, {0, 0, 0, 0, 0});
  for (const auto& [n, r] : zero) CHECK(r == 0.0);
  const auto plus = normalized_count_ratio(truth, {1, 2, 3, 3, 4});
  CHECK(plus.at(1) == 2.0);
  CHECK(plus.at(2) == 1.5);
  CHECK(plus.at(3) == doctest::Approx(4.0 / 3.0));
  CHECK(plus.count(0) == 0);
  CHECK(normalized_count_ratio({}, {}).empty());
}

TEST_CASE("reduction") {
  // 0.98545... is quoted truncated to four decimals.
  CHECK(std::trunc(reduction(16, 1100) * 1e4) / 1e4 == 0.9854);
  CHECK(std::abs(reduction(16, 1100) - 0.9854) < 1e-4);
  CHECK(reduction(42, 336) == 0.875);
  CHECK(reduction(7, 7) == 0.0);
  Rng rng(4);
  for (int t = 0; t < 1000; ++t) {
    const double b = rng.uniform(1, 1000), a = rng.uniform(0, b);
    CHECK(reduction(a, b) + a / b == 1.0);
  }
}
