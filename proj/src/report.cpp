#include "hcount/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <fmt/format.h>

#include "hcount/metrics.hpp"

namespace hcount {

namespace {

constexpr double kWidth = 480, kHeight = 320, kLeft = 56, kRight = 16, kTop = 24, kBottom = 44;
const char* const kColours[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string header(double w, double h) {
  return fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\" "
      "font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"{0}\" height=\"{1}\" fill=\"white\"/>\n",
      w, h);
}

// Axis frame with y ticks; returns the markup.
std::string frame(double x0, double y0, double w, double h, double y_max, const std::string& title,
                  const std::string& x_label) {
  std::string s = fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
                              x0, y0, w, h);
  s += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", x0 + w / 2, y0 - 8, escape(title));
  s += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", x0 + w / 2, y0 + h + 34,
                   escape(x_label));
  for (int t = 0; t <= 4; ++t) {
    const double v = y_max * t / 4.0, y = y0 + h - h * t / 4.0;
    s += fmt::format("<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#ddd\"/>\n", x0, y, x0 + w, y);
    s += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3g}</text>\n", x0 - 4, y + 4, v);
  }
  return s;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace

std::string count_ratio_svg(const std::vector<RatioSeries>& series) {
  std::size_t max_n = 1;
  double max_ratio = 1.0;
  for (const auto& s : series) {
    for (const auto& [n, r] : s.ratios) {
      max_n = std::max(max_n, n);
      if (std::isfinite(r)) max_ratio = std::max(max_ratio, r);
    }
  }
  const double y_max = std::ceil(max_ratio * 4 + 1e-9) / 4;  // headroom above the 1.0 line
  const double w = kWidth - kLeft - kRight, h = kHeight - kTop - kBottom;
  std::string svg = header(kWidth, kHeight);
  svg += frame(kLeft, kTop, w, h, y_max, "Reported / actual count", "objects per image");
  const auto xpos = [&](std::size_t n) { return kLeft + w * (max_n == 1 ? 0.5 : static_cast<double>(n - 1) / static_cast<double>(max_n - 1)); };
  const auto ypos = [&](double r) { return kTop + h - h * r / y_max; };
  for (std::size_t n = 1; n <= max_n; ++n)
    svg += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", xpos(n), kTop + h + 14, n);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto* colour = kColours[i % std::size(kColours)];
    std::string points;
    for (const auto& [n, r] : series[i].ratios) points += fmt::format("{},{} ", xpos(n), ypos(r));
    svg += fmt::format("<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>\n", colour, points);
    for (const auto& [n, r] : series[i].ratios)
      svg += fmt::format("<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{}\" data-series=\"{}\" data-count=\"{}\" data-ratio=\"{}\"/>\n",
                         xpos(n), ypos(r), colour, escape(series[i].label), n, r);
    svg += fmt::format("<text x=\"{}\" y=\"{}\" fill=\"{}\">{}</text>\n", kLeft + 8, kTop + 14 + 14 * static_cast<double>(i),
                       colour, escape(series[i].label));
  }
  return svg + "</svg>\n";
}

std::string cost_bars_svg(const std::vector<CostBar>& bars) {
  const double panel_w = (kWidth * 2 - 2 * (kLeft + kRight)) / 2, h = kHeight - kTop - kBottom;
  std::string svg = header(kWidth * 2, kHeight);
  const auto panel = [&](double x0, const std::string& title, auto value) {
    double top = 0;
    for (const auto& b : bars) top = std::max(top, value(b));
    if (top <= 0) top = 1;
    svg += frame(x0, kTop, panel_w, h, top, title, "model");
    const double slot = bars.empty() ? panel_w : panel_w / static_cast<double>(bars.size());
    for (std::size_t i = 0; i < bars.size(); ++i) {
      const double v = value(bars[i]), bh = h * v / top, x = x0 + slot * (static_cast<double>(i) + 0.2);
      svg += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\" data-value=\"{}\"/>\n", x,
                         kTop + h - bh, slot * 0.6, bh, kColours[i % std::size(kColours)], v);
      svg += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", x + slot * 0.3, kTop + h + 14,
                         escape(bars[i].label));
    }
  };
  panel(kLeft, "Mean operations per query", [](const CostBar& b) { return b.operations; });
  panel(kWidth + kLeft, "Path memory (bytes)", [](const CostBar& b) { return b.memory_bytes; });
  return svg + "</svg>\n";
}

ReportFigures render_report_figures(const std::filesystem::path& dir, const std::vector<RatioSeries>& series,
                                    const std::vector<CostBar>& bars) {
  std::filesystem::create_directories(dir);
  ReportFigures out{dir / "count_ratio.svg", dir / "cost_bars.svg"};
  write_file(out.count_ratio, count_ratio_svg(series));
  write_file(out.cost_bars, cost_bars_svg(bars));
  return out;
}

CompareReport make_compare_report(const Evaluation& hier, std::uint64_t hier_memory, const Evaluation& flat,
                                  std::uint64_t flat_memory, const Evaluation& semantic,
                                  std::uint64_t semantic_memory) {
  if (hier.records.size() != flat.records.size())
    throw std::invalid_argument("hierarchical and flat evaluations cover different queries");
  CompareReport r;
  r.hierarchical = {"hierarchical", hier.summary, hier_memory};
  r.flat = {"flat", flat.summary, flat_memory};
  r.semantic = {"semantic-tree", semantic.summary, semantic_memory};
  r.rmse_gap = hier.summary.rmse - flat.summary.rmse;
  if (flat.summary.mean_ops > 0) {
    r.ops_ratio = hier.summary.mean_ops / flat.summary.mean_ops;
    r.ops_reduction = reduction(hier.summary.mean_ops, flat.summary.mean_ops);
  }
  if (flat_memory > 0) {
    r.memory_ratio = static_cast<double>(hier_memory) / static_cast<double>(flat_memory);
    r.memory_reduction = reduction(static_cast<double>(hier_memory), static_cast<double>(flat_memory));
  }
  r.flat_ops_dominate = true;
  for (std::size_t i = 0; i < hier.records.size(); ++i) {
    if (hier.records[i].id != flat.records[i].id || hier.records[i].query != flat.records[i].query)
      throw std::invalid_argument("hierarchical and flat records are not aligned");
    r.flat_ops_dominate = r.flat_ops_dominate && flat.records[i].ops >= hier.records[i].ops;
  }
  return r;
}

namespace {

nlohmann::json model_json(const ModelResult& m) {
  nlohmann::json ratios = nlohmann::json::object();
  for (const auto& [n, v] : m.summary.ratios) ratios[std::to_string(n)] = v;
  return {{"label", m.label},
          {"rmse", m.summary.rmse},
          {"map", m.summary.map},
          {"mean_ops", m.summary.mean_ops},
          {"path_memory", m.path_memory},
          {"ratios", ratios},
          {"degenerate_queries", m.summary.degenerate_queries}};
}

}  // namespace

nlohmann::json CompareReport::to_json() const {
  return {{"hierarchical", model_json(hierarchical)},
          {"flat", model_json(flat)},
          {"semantic_tree", model_json(semantic)},
          {"rmse_gap", rmse_gap},
          {"semantic_rmse", semantic.summary.rmse},
          {"ops_ratio", ops_ratio},
          {"ops_reduction", ops_reduction},
          {"memory_ratio", memory_ratio},
          {"memory_reduction", memory_reduction},
          {"flat_ops_dominate", flat_ops_dominate}};
}

}  // namespace hcount
