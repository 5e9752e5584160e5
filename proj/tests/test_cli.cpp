#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "hcount/pipeline.hpp"

using namespace hcount;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(HCOUNT_CLI) + " " + args + " 2>/dev/null";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe);
  std::array<char, 4096> buf{};
  while (fgets(buf.data(), buf.size(), pipe)) r.out += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string last_line(const std::string& s) {
  std::string line, last;
  std::istringstream in(s);
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  return last;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

const fs::path& workdir() {
  static const fs::path dir = [] {
    const auto d = fs::temp_directory_path() / "hcount_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    std::ofstream(d / "small.json") << R"({"train_images": 30, "test_images": 6, "rpn_train": {"epochs": 1},
      "train": {"epochs": 2, "initial_lr": 0.01}, "search": {"max_depth": 2, "probe_epochs": 3}})";
    return d;
  }();
  return dir;
}

std::string base(const std::string& out) {
  return "-c " + (workdir() / "small.json").string() + " -o " + (workdir() / out).string() + " -j 2";
}

}  // namespace

TEST_CASE("run config layering") {
  const RunConfig defaults;
  CHECK_NOTHROW(defaults.validate());
  CHECK(RunConfig::from_json(nlohmann::json::object()).to_json() == defaults.to_json());
  const auto c = RunConfig::from_json({{"seed", 9}, {"train", {{"epochs", 4}}}});
  CHECK(c.seed == 9);
  CHECK(c.train.epochs == 4);
  CHECK(c.train.initial_lr == defaults.train.initial_lr);
  // A later layer only replaces what it names.
  const auto d = RunConfig::from_json({{"train", {{"initial_lr", 0.5}}}}, c);
  CHECK(d.train.epochs == 4);
  CHECK(d.train.initial_lr == 0.5);
  CHECK(RunConfig::from_json(c.to_json()).to_json() == c.to_json());
  const auto m = RunConfig::from_json({{"membership", {{"slope", 12.0}, {"center", 0.3}}}});
  REQUIRE(m.membership.has_value());
  CHECK(m.membership->slope == 12.0);

  CHECK_THROWS_AS(RunConfig::from_json({{"seeds", 1}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"train", {{"epoch", 1}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"train", {{"epochs", "many"}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(nlohmann::json::array()), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"search", {{"probe_epochs", 1}}}}).validate(), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json({{"test_images", 0}}).validate(), ConfigError);
  CHECK_THROWS_AS(load_run_config(workdir() / "absent.json"), ConfigError);
}

TEST_CASE("commands, artifacts and exit codes") {
  const auto dir = workdir() / "a";
  const auto cmp = run(base("a") + " compare");
  REQUIRE(cmp.code == 0);
  const auto report = nlohmann::json::parse(cmp.out);
  for (const char* key : {"rmse_gap", "ops_reduction", "memory_reduction", "semantic_rmse"}) CHECK(report.contains(key));
  for (const char* f : {"config.json", "stages.json", "rpn.hcnt", "tree/tree.json", "semantic-tree/tree.json",
                        "flat/flat.hcnt", "eval_tree.json", "eval_flat.json", "compare.json",
                        "figures/count_ratio.svg", "figures/cost_bars.svg"})
    CHECK_MESSAGE(fs::exists(dir / f), f);

  // Same config and seed: identical records, with or without resume.
  const auto fresh = run(base("b") + " compare");
  REQUIRE(fresh.code == 0);
  CHECK(slurp(dir / "eval_tree.json") == slurp(workdir() / "b" / "eval_tree.json"));
  CHECK(slurp(dir / "compare.json") == slurp(workdir() / "b" / "compare.json"));
  const auto stamps = slurp(dir / "stages.json");
  const auto again = run(base("a") + " compare");
  CHECK(again.out == cmp.out);
  CHECK(slurp(dir / "stages.json") == stamps);

  std::string image;
  for (const auto& e : fs::directory_iterator(dir / "data"))
    if (e.path().extension() == ".ppm") image = e.path().string();
  REQUIRE_FALSE(image.empty());
  for (const std::string flag : {"", " --flat"}) {
    const auto c = run(base("a") + " count --image " + image + " --query disc-dot" + flag);
    CHECK(c.code == 0);
    const auto line = last_line(c.out);
    CHECK_FALSE(line.empty());
    CHECK(line.find_first_not_of("0123456789") == std::string::npos);
  }

  const auto flat_tree = run(base("a") + " inspect-tree --flat");
  CHECK(flat_tree.code == 0);
  CHECK(flat_tree.out.find("depth: 1\n") != std::string::npos);
  CHECK(flat_tree.out.find("average branching: 8\n") != std::string::npos);
  CHECK(run(base("a") + " inspect-tree").code == 0);

  CHECK(run(base("a") + " count --image " + image + " --query pyramid").code == 2);
  CHECK(run(base("a") + " count --image /nonexistent.ppm --query disc").code == 3);
  CHECK(run(base("a") + " build-tree --name bad --partition '[\"disc\"]'").code == 2);
  CHECK(run(base("empty") + " inspect-tree").code == 3);
  CHECK(run("frobnicate").code == 2);
  std::ofstream(workdir() / "bad.json") << R"({"bogus": true})";
  CHECK(run("-c " + (workdir() / "bad.json").string() + " gen-data").code == 2);
  std::ofstream(workdir() / "diverge.json") << R"({"train_images": 10, "test_images": 2, "rpn_train": {"epochs": 2, "initial_lr": 1e30}})";
  CHECK(run("-c " + (workdir() / "diverge.json").string() + " -o " + (workdir() / "d").string() + " train-rpn").code == 4);
}

TEST_CASE("error records are one JSON line on stderr") {
  const std::string cmd = std::string(HCOUNT_CLI) + " count --image /nonexistent.ppm --query disc 2>&1 >/dev/null";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe);
  std::array<char, 4096> buf{};
  std::string err;
  while (fgets(buf.data(), buf.size(), pipe)) err += buf.data();
  pclose(pipe);
  const auto j = nlohmann::json::parse(last_line(err));
  CHECK(j.at("exit_code") == 3);
  CHECK(j.at("error") == "data");
}
