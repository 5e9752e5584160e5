#include "hcount/archsearch.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include <spdlog/spdlog.h>

#include "hcount/metrics.hpp"
#include "hcount/rng.hpp"

namespace hcount {

void SearchConfig::validate() const {
  if (!(threshold >= 0)) throw std::invalid_argument("search threshold must be non-negative");
  if (max_depth < 1) throw std::invalid_argument("max_depth must be at least 1");
  if (probe_epochs < 3) throw std::invalid_argument("probe_epochs must be at least 3 for extrapolation");
  if (!(subsample_fraction > 0 && subsample_fraction <= 1)) throw std::invalid_argument("subsample_fraction must be in (0, 1]");
  if (!(holdout_fraction > 0 && holdout_fraction < 1)) throw std::invalid_argument("holdout_fraction must be in (0, 1)");
}

double delta_id(const CandidateRecord& current, const CandidateRecord& next) {
  if (next.memory_mb == current.memory_mb) throw std::domain_error("information density change undefined for equal memory");
  return (next.map - current.map) / (next.memory_mb - current.memory_mb);
}

std::vector<std::size_t> sample_subset_indices(const DatasetManifest& data, double fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction <= 1)) throw std::invalid_argument("subset fraction must be in (0, 1]");
  const std::size_t n = data.samples.size();
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  if (fraction == 1 || n == 0) return all;

  // Stratum of an image: its rarest category, or "empty".
  const std::size_t k = data.categories.size();
  std::vector<std::size_t> images_with(k, 0);
  std::vector<std::vector<bool>> present(n, std::vector<bool>(k, false));
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& a : data.samples[i].annotations) present[i][static_cast<std::size_t>(a.category)] = true;
    for (std::size_t c = 0; c < k; ++c) images_with[c] += present[i][c];
  }
  std::map<std::size_t, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t key = k;
    for (std::size_t c = 0; c < k; ++c) {
      if (present[i][c] && (key == k || images_with[c] < images_with[key])) key = c;
    }
    strata[key].push_back(i);
  }
  Rng rng(derive_seed(seed, "subset"));
  for (auto& [key, members] : strata) rng.shuffle(members.begin(), members.end());

  const auto target = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))));
  std::vector<bool> chosen(n, false);
  std::size_t count = 0;
  // Coverage first: one image per present category.
  std::vector<bool> covered(k, false);
  for (const auto& [key, members] : strata) {
    if (key < k && !covered[key]) {
      chosen[members.front()] = true;
      ++count;
      for (std::size_t c = 0; c < k; ++c) covered[c] = covered[c] || present[members.front()][c];
    }
  }
  // Proportional quotas, largest remainder.
  struct Quota {
    std::size_t key, take;
    double remainder;
  };
  std::vector<Quota> quotas;
  std::size_t assigned = 0;
  for (const auto& [key, members] : strata) {
    const double exact = fraction * static_cast<double>(members.size());
    const auto base = static_cast<std::size_t>(std::floor(exact));
    quotas.push_back({key, base, exact - static_cast<double>(base)});
    assigned += base;
  }
  std::vector<std::size_t> by_remainder(quotas.size());
  std::iota(by_remainder.begin(), by_remainder.end(), 0);
  std::stable_sort(by_remainder.begin(), by_remainder.end(),
                   [&](std::size_t a, std::size_t b) { return quotas[a].remainder > quotas[b].remainder; });
  for (std::size_t i = 0; assigned < target && i < by_remainder.size(); ++i, ++assigned) ++quotas[by_remainder[i]].take;
  for (const auto& q : quotas) {
    const auto& members = strata.at(q.key);
    std::size_t have = 0;
    for (auto m : members) have += chosen[m];
    for (std::size_t i = 0; i < members.size() && have < q.take && count < target; ++i) {
      if (!chosen[members[i]]) {
        chosen[members[i]] = true;
        ++have;
        ++count;
      }
    }
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < n; ++i)
    if (chosen[i]) out.push_back(i);
  return out;
}

DatasetManifest sample_subset(const DatasetManifest& data, double fraction, std::uint64_t seed) {
  DatasetManifest out;
  out.categories = data.categories;
  out.split = data.split;
  out.seed = data.seed;
  out.config = data.config;
  for (auto i : sample_subset_indices(data, fraction, seed)) out.samples.push_back(data.samples[i]);
  out.config.num_images = out.samples.size();
  return out;
}

namespace {

struct Fit {
  double c = 0, alpha = 0, sse = std::numeric_limits<double>::infinity();
};

// Best (c, alpha) for a fixed beta, c clamped to [lo, 1].
Fit fit_for_beta(const std::vector<double>& y, double beta, double lo) {
  const auto n = static_cast<double>(y.size());
  std::vector<double> x(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) x[i] = std::pow(static_cast<double>(i + 1), -beta);
  const double sx = std::accumulate(x.begin(), x.end(), 0.0), sy = std::accumulate(y.begin(), y.end(), 0.0);
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  // y = c - alpha * x
  const double det = n * sxx - sx * sx;
  Fit f;
  if (std::abs(det) > 1e-15) {
    f.alpha = -(n * sxy - sx * sy) / det;
    f.c = (sy + f.alpha * sx) / n;
  } else {
    f.c = sy / n;
  }
  if (f.c < lo || f.c > 1) {
    f.c = std::clamp(f.c, lo, 1.0);
    double num = 0;
    for (std::size_t i = 0; i < y.size(); ++i) num += (f.c - y[i]) * x[i];
    f.alpha = num / sxx;
  }
  f.sse = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double r = f.c - f.alpha * x[i] - y[i];
    f.sse += r * r;
  }
  return f;
}

}  // namespace

double extrapolate_map(const std::vector<double>& history, std::size_t full_epochs) {
  if (history.size() < 3) throw std::invalid_argument("extrapolation needs at least 3 epochs of history");
  const double last = history.back();
  if (full_epochs <= history.size()) return last;
  if (!std::all_of(history.begin(), history.end(), [](double v) { return std::isfinite(v); })) return last;
  const double lo = std::min(last, 1.0);

  double best_beta = 1;
  Fit best;
  for (int i = 0; i <= 400; ++i) {
    const double beta = std::pow(10.0, -2.0 + 3.5 * i / 400.0);
    const Fit f = fit_for_beta(history, beta, lo);
    if (f.sse < best.sse) {
      best = f;
      best_beta = beta;
    }
  }
  // Golden-section refinement in log(beta) around the grid minimum.
  double a = std::log(best_beta) - 0.03, b = std::log(best_beta) + 0.03;
  const double g = (std::sqrt(5.0) - 1) / 2;
  for (int it = 0; it < 60; ++it) {
    const double x1 = b - g * (b - a), x2 = a + g * (b - a);
    if (fit_for_beta(history, std::exp(x1), lo).sse < fit_for_beta(history, std::exp(x2), lo).sse) {
      b = x2;
    } else {
      a = x1;
    }
  }
  const Fit refined = fit_for_beta(history, std::exp((a + b) / 2), lo);
  if (refined.sse <= best.sse) {
    best = refined;
    best_beta = std::exp((a + b) / 2);
  }
  if (!(best.alpha > 0) || !std::isfinite(best.c) || !std::isfinite(best.alpha)) return last;
  const double estimate = best.c - best.alpha * std::pow(static_cast<double>(full_epochs), -best_beta);
  if (!std::isfinite(estimate)) return last;
  return std::clamp(estimate, lo, 1.0);
}

nlohmann::json SearchTrace::to_json() const {
  auto record = [](const CandidateRecord& r) {
    return nlohmann::json{{"depth", r.depth}, {"map", r.map}, {"memory_mb", r.memory_mb}};
  };
  nlohmann::json steps_json = nlohmann::json::array();
  for (const auto& s : steps) {
    steps_json.push_back({{"current", record(s.current)},
                          {"next", record(s.next)},
                          {"delta_id", s.delta},
                          {"decision", s.advance ? "advance" : "stop"}});
  }
  return {{"threshold", threshold},
          {"selected_depth", selected_depth},
          {"reached_max_depth", reached_max_depth},
          {"steps", steps_json}};
}

SearchTrace select_depth(const CandidateEvaluator& evaluate, const SearchConfig& cfg) {
  if (!(cfg.threshold >= 0)) throw std::invalid_argument("search threshold must be non-negative");
  if (cfg.max_depth < 1) throw std::invalid_argument("max_depth must be at least 1");
  SearchTrace trace;
  trace.threshold = cfg.threshold;
  std::map<std::size_t, CandidateRecord> seen;
  auto get = [&](std::size_t depth) -> const CandidateRecord& {
    auto it = seen.find(depth);
    if (it == seen.end()) {
      CandidateRecord r = evaluate(depth);
      r.depth = depth;
      it = seen.emplace(depth, r).first;
    }
    return it->second;
  };
  std::size_t i = 1;
  while (true) {
    if (i == cfg.max_depth) {
      trace.reached_max_depth = true;
      if (cfg.max_depth > 1) spdlog::warn("depth search reached max_depth {} without meeting the threshold", i);
      break;
    }
    const CandidateRecord current = get(i);
    const CandidateRecord next = get(i + 1);
    SearchStep step{current, next, delta_id(current, next), false};
    step.advance = step.delta > cfg.threshold;
    trace.steps.push_back(step);
    if (!step.advance) break;
    ++i;
  }
  trace.selected_depth = i;
  return trace;
}

double node_map(const Network& net, const NodeData& data) {
  std::size_t truth_count = 0;
  for (const auto& t : data.eval_truths) truth_count += t.size();
  if (truth_count == 0) return 0.0;
  std::vector<std::vector<Detection>> dets(data.eval_truths.size());
  if (data.eval.size() > 0) {
    const Tensor probs = predict(net, data.eval);
    // Group RoIs by image, then per class NMS.
    std::vector<std::vector<std::size_t>> by_image(data.eval_truths.size());
    for (std::size_t r = 0; r < data.eval.size(); ++r) by_image.at(data.eval.image[r]).push_back(r);
    for (std::size_t img = 0; img < by_image.size(); ++img) {
      for (std::size_t c = 0; c < data.classes; ++c) {
        if (static_cast<int>(c) == data.background) continue;
        std::vector<ScoredBox> boxes;
        for (auto r : by_image[img]) boxes.push_back({data.eval.boxes[r], probs[r * data.classes + c]});
        for (auto k : nms(boxes, 0.5)) dets[img].push_back({boxes[k].box, boxes[k].score, static_cast<int>(c)});
      }
    }
  }
  return mean_average_precision(dets, data.eval_truths, 0.5);
}

ArchitectureChoice select_architecture(const NodeData& data, const SearchConfig& cfg, const TrainConfig& train,
                                       std::uint64_t seed) {
  cfg.validate();
  if (data.train.size() == 0) throw std::invalid_argument("architecture search needs training RoIs");
  TrainConfig probe = train;
  probe.epochs = cfg.probe_epochs;
  auto evaluate = [&](std::size_t depth) {
    Network net(node_spec(data.train.shape, depth, data.classes), derive_seed(seed, "search/init", depth));
    std::vector<double> history;
    train_classifier(net, data.train, data.train_targets, probe, derive_seed(seed, "search/train", depth),
                     [&](std::size_t, const Network& n) { history.push_back(node_map(n, data)); });
    CandidateRecord r;
    r.depth = depth;
    r.map = extrapolate_map(history, train.epochs);
    r.memory_mb = megabytes(param_memory(net.spec()));
    spdlog::debug("depth {}: probe mAP {:.4f}, extrapolated {:.4f}, {:.5f} MB", depth, history.back(), r.map,
                  r.memory_mb);
    return r;
  };
  ArchitectureChoice out;
  out.trace = select_depth(evaluate, cfg);
  out.spec = node_spec(data.train.shape, out.trace.selected_depth, data.classes);
  return out;
}

}  // namespace hcount
