#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "hcount/counting.hpp"

namespace hcount {

struct RatioSeries {
  std::string label;
  std::map<std::size_t, double> ratios;  // true count -> mean reported / true
};

struct CostBar {
  std::string label;
  double operations = 0;    // mean per query
  double memory_bytes = 0;  // static path memory
};

/// Normalized count ratio against objects per image. Every point carries a
/// data-ratio attribute. No series gives empty axes.
std::string count_ratio_svg(const std::vector<RatioSeries>& series);
/// Two panels of bars: operations and memory.
std::string cost_bars_svg(const std::vector<CostBar>& bars);

struct ReportFigures {
  std::filesystem::path count_ratio;
  std::filesystem::path cost_bars;
};
ReportFigures render_report_figures(const std::filesystem::path& dir, const std::vector<RatioSeries>& series,
                                    const std::vector<CostBar>& bars);

struct ModelResult {
  std::string label;
  EvalSummary summary;
  std::uint64_t path_memory = 0;  // static; the longest path for a tree
};

struct CompareReport {
  ModelResult hierarchical, flat, semantic;
  double rmse_gap = 0;          // hierarchical minus flat
  double ops_ratio = 0;         // mean dynamic ops, hierarchical over flat
  double ops_reduction = 0;
  double memory_ratio = 0;      // static path memory, hierarchical over flat
  double memory_reduction = 0;
  bool flat_ops_dominate = false;  // flat >= hierarchical on every query
  nlohmann::json to_json() const;
};

/// `hier` and `flat` must hold the same queries in the same order.
CompareReport make_compare_report(const Evaluation& hier, std::uint64_t hier_memory, const Evaluation& flat,
                                  std::uint64_t flat_memory, const Evaluation& semantic, std::uint64_t semantic_memory);

}  // namespace hcount
