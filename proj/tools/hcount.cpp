// Command-line entry point. Logs go to stderr; results go to stdout.

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "hcount/model_io.hpp"
#include "hcount/pipeline.hpp"

using namespace hcount;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kDivergence = 4 };

int fail(Exit code, const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"exit_code", static_cast<int>(code)}, {"message", message}}.dump() << std::endl;
  return code;
}

// A partition given inline as JSON or as a path to a JSON file.
json read_partition(const std::string& arg) {
  try {
    if (std::filesystem::exists(arg)) {
      std::ifstream in(arg);
      return json::parse(in);
    }
    return json::parse(arg);
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse partition '" + arg + "': " + e.what());
  }
}

void print_tree(const Hierarchy& h) {
  const auto names = [&](const std::vector<int>& members) {
    std::string s;
    for (int c : members) s += (s.empty() ? "" : ",") + h.categories.names[static_cast<std::size_t>(c)];
    return s;
  };
  std::function<void(std::size_t, int)> walk = [&](std::size_t id, int indent) {
    const auto& n = h.nodes[id];
    std::cout << std::string(static_cast<std::size_t>(2 * indent), ' ') << "node " << id;
    if (n.is_leaf()) {
      std::cout << " leaf " << names(n.members) << "\n";
      return;
    }
    std::cout << " conv_depth " << n.conv_depth << " classes " << n.class_count() << " members " << names(n.members)
              << (n.degenerate ? " degenerate" : "") << "\n";
    for (auto c : n.children) walk(c, indent + 1);
  };
  walk(0, 0);
  std::cout << "partition: " << h.partition().dump() << "\n";
  std::cout << "depth: " << h.depth() << "\n";
  std::cout << "average branching: " << h.average_branching() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("hcount"));

  CLI::App app{"Hierarchical object counter on synthetic shape scenes"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand
  std::string config_file, out_dir, log_level = "info";
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  app.add_option("-c,--config", config_file, "JSON run config (flags override it)");
  app.add_option("-o,--out", out_dir, "Output directory (overrides HCOUNT_OUT_DIR and the config)");
  app.add_option("--seed", seed, "Top-level seed");
  app.add_option("-j,--workers", workers, "Parallel workers, 0 for all cores");
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off");

  std::string tree_name = "tree", partition_arg, image_path, query, tree_dir;
  bool use_flat = false;

  auto* gen = app.add_subcommand("gen-data", "Generate the train and test splits");
  auto* rpn_cmd = app.add_subcommand("train-rpn", "Train the region proposal network");
  auto* build = app.add_subcommand("build-tree", "Search node depths and group categories");
  auto* train = app.add_subcommand("train-tree", "Train the tree root-down");
  for (auto* sub : {build, train}) {
    sub->add_option("--name", tree_name, "Tree artifact name");
    sub->add_option("--partition", partition_arg, "Nested category partition (JSON or file) instead of grouping");
  }
  auto* count = app.add_subcommand("count", "Count objects of one category in one image");
  count->add_option("--image", image_path, "Binary PPM image")->required();
  count->add_option("--query", query, "Category name or index")->required();
  count->add_option("--name", tree_name, "Tree artifact name");
  count->add_flag("--flat", use_flat, "Use the flat detector");
  auto* evaluate = app.add_subcommand("evaluate", "Evaluate on the test split");
  evaluate->add_option("--name", tree_name, "Tree artifact name");
  evaluate->add_flag("--flat", use_flat, "Evaluate the flat detector instead");
  auto* compare = app.add_subcommand("compare", "Hierarchical vs flat vs semantic tree report");
  auto* inspect = app.add_subcommand("inspect-tree", "Print tree topology");
  inspect->add_option("--name", tree_name, "Tree artifact name");
  inspect->add_option("--dir", tree_dir, "Tree directory (overrides --name)");
  inspect->add_flag("--flat", use_flat, "Show the flat detector as a depth-one tree");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(kConfig, "config", e.what());
  }

  try {
    spdlog::set_level(spdlog::level::from_str(log_level));
    RunConfig cfg;
    if (!config_file.empty()) cfg = load_run_config(config_file);
    if (const char* env = std::getenv("HCOUNT_OUT_DIR"); env && *env) cfg.output_dir = env;
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    if (seed) cfg.seed = *seed;
    if (workers) cfg.workers = *workers;
    std::optional<json> partition;
    if (!partition_arg.empty()) partition = read_partition(partition_arg);

    if (*count) {
      cfg.validate();
      const Tensor image = read_ppm(image_path);
      std::size_t n = 0;
      if (use_flat) {
        const FlatDetector flat = load_flat_detector(cfg.output_dir / "flat");
        n = flat_count(flat, image, resolve_query(flat.categories, query), cfg.count).count;
      } else {
        const Hierarchy h = load_hierarchy(cfg.output_dir / tree_name);
        const auto r = route_and_count(h, image, resolve_query(h.categories, query), cfg.count);
        if (r.degenerate) spdlog::warn("an untrained node lies on the query path");
        spdlog::info("path {} ops {} path memory {} B", json(r.path).dump(), r.cost.operations, r.cost.path_memory_bytes);
        n = r.count;
      }
      std::cout << n << std::endl;
      return kOk;
    }
    if (*inspect) {
      cfg.validate();
      if (use_flat) {
        print_tree(as_depth_one(load_flat_detector(cfg.output_dir / "flat")));
      } else {
        print_tree(load_hierarchy(tree_dir.empty() ? cfg.output_dir / tree_name : std::filesystem::path(tree_dir)));
      }
      return kOk;
    }

    Pipeline p(cfg);
    if (*gen) {
      p.train_data();
      std::cout << (p.dir() / "data").string() << std::endl;
    } else if (*rpn_cmd) {
      p.rpn();
      std::cout << (p.dir() / "rpn.hcnt").string() << std::endl;
    } else if (*build) {
      const Hierarchy h = p.built_tree(tree_name, partition);
      std::cout << h.partition().dump() << std::endl;
    } else if (*train) {
      const Hierarchy h = p.trained_tree(tree_name, partition);
      std::cout << h.partition().dump() << std::endl;
    } else if (*evaluate) {
      const Evaluation ev = use_flat ? p.evaluate_flat_detector() : p.evaluate_tree(p.trained_tree(tree_name, partition), tree_name);
      std::cout << ev.to_json().at("summary").dump(2) << std::endl;
    } else if (*compare) {
      std::cout << p.compare().to_json().dump(2) << std::endl;
    }
    return kOk;
  } catch (const ConfigError& e) {
    return fail(kConfig, "config", e.what());
  } catch (const std::out_of_range& e) {
    return fail(kConfig, "query", e.what());
  } catch (const DivergenceError& e) {
    return fail(kDivergence, "divergence", e.what());
  } catch (const DatasetError& e) {
    return fail(kData, "data", e.what());
  } catch (const ModelFormatError& e) {
    return fail(kData, "data", e.what());
  } catch (const HierarchyError& e) {
    // A rejected --partition is user input; anything else is a bad artifact.
    return partition_arg.empty() ? fail(kData, "data", e.what()) : fail(kConfig, "config", e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(kData, "data", e.what());
  } catch (const std::exception& e) {
    return fail(kFailure, "internal", e.what());
  }
}
