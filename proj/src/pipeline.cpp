#include "hcount/pipeline.hpp"

#include <fstream>

#include <spdlog/spdlog.h>

#include "hcount/kernels.hpp"
#include "hcount/rng.hpp"

namespace hcount {

using nlohmann::json;

namespace {

json train_json(const TrainConfig& t) {
  return {{"batch_size", t.batch_size},
          {"epochs", t.epochs},
          {"initial_lr", t.initial_lr},
          {"lr_drop_factor", t.lr_drop_factor},
          {"lr_drop_period_epochs", t.lr_drop_period_epochs}};
}

TrainConfig train_from(const json& j) {
  TrainConfig t;
  t.batch_size = j.at("batch_size");
  t.epochs = j.at("epochs");
  t.initial_lr = j.at("initial_lr");
  t.lr_drop_factor = j.at("lr_drop_factor");
  t.lr_drop_period_epochs = j.at("lr_drop_period_epochs");
  return t;
}

// Every key of `user` must exist in `defaults`; objects recurse unless the
// default is null (an optional section) or the key names free-form data.
void check_keys(const json& user, const json& defaults, const std::string& where) {
  if (!user.is_object()) throw ConfigError(where.empty() ? "config must be a JSON object" : where + " must be an object");
  for (const auto& [key, value] : user.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!defaults.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    const auto& d = defaults.at(key);
    if (d.is_object() && value.is_object()) check_keys(value, d, path);
  }
}

}  // namespace

json RunConfig::to_json() const {
  const auto& d = dataset;
  return {
      {"seed", seed},
      {"train_images", train_images},
      {"test_images", test_images},
      {"dataset",
       {{"image_size", d.image_size},
        {"max_objects", d.max_objects},
        {"min_object_size", d.min_object_size},
        {"max_object_size", d.max_object_size},
        {"detail_contrast", d.detail_contrast},
        {"pixel_noise", d.pixel_noise},
        {"colour_jitter", d.colour_jitter},
        {"max_overlap_iou", d.max_overlap_iou},
        {"placement_retries", d.placement_retries}}},
      {"rpn",
       {{"stride", rpn.anchors.stride},
        {"scales", rpn.anchors.scales},
        {"aspect_ratios", rpn.anchors.aspect_ratios},
        {"positive_iou", rpn.positive_iou},
        {"negative_iou", rpn.negative_iou},
        {"match_best_anchor", rpn.match_best_anchor},
        {"anchors_per_image", rpn.anchors_per_image},
        {"max_positive", rpn.max_positive},
        {"regression_weight", rpn.regression_weight},
        {"nms_iou", rpn.nms_iou}}},
      {"rpn_train", train_json(rpn_train)},
      {"train", train_json(train)},
      {"search",
       {{"threshold", search.threshold},
        {"max_depth", search.max_depth},
        {"probe_epochs", search.probe_epochs},
        {"subsample_fraction", search.subsample_fraction},
        {"holdout_fraction", search.holdout_fraction}}},
      {"membership", membership ? json{{"slope", membership->slope}, {"center", membership->center}} : json()},
      {"sampling",
       {{"proposals", sampling.proposals},
        {"rpn_nms_iou", sampling.rpn_nms_iou},
        {"pool", sampling.pool},
        {"max_positive", sampling.max_positive},
        {"max_background", sampling.max_background}}},
      {"count",
       {{"proposals", count.proposals},
        {"rpn_nms_iou", count.rpn_nms_iou},
        {"nms_iou", count.nms_iou},
        {"score_threshold", count.score_threshold}}},
      {"semantic_partition", semantic_partition},
      {"output_dir", output_dir.string()},
      {"workers", workers},
  };
}

RunConfig RunConfig::from_json(const json& user, RunConfig base) {
  json merged = base.to_json();
  check_keys(user, merged, "");
  merged.merge_patch(user);
  RunConfig c = base;
  try {
    c.seed = merged.at("seed");
    c.train_images = merged.at("train_images");
    c.test_images = merged.at("test_images");
    const auto& d = merged.at("dataset");
    c.dataset.image_size = d.at("image_size");
    c.dataset.max_objects = d.at("max_objects");
    c.dataset.min_object_size = d.at("min_object_size");
    c.dataset.max_object_size = d.at("max_object_size");
    c.dataset.detail_contrast = d.at("detail_contrast");
    c.dataset.pixel_noise = d.at("pixel_noise");
    c.dataset.colour_jitter = d.at("colour_jitter");
    c.dataset.max_overlap_iou = d.at("max_overlap_iou");
    c.dataset.placement_retries = d.at("placement_retries");
    const auto& r = merged.at("rpn");
    c.rpn.anchors.stride = r.at("stride");
    c.rpn.anchors.scales = r.at("scales").get<std::vector<double>>();
    c.rpn.anchors.aspect_ratios = r.at("aspect_ratios").get<std::vector<double>>();
    c.rpn.positive_iou = r.at("positive_iou");
    c.rpn.negative_iou = r.at("negative_iou");
    c.rpn.match_best_anchor = r.at("match_best_anchor");
    c.rpn.anchors_per_image = r.at("anchors_per_image");
    c.rpn.max_positive = r.at("max_positive");
    c.rpn.regression_weight = r.at("regression_weight");
    c.rpn.nms_iou = r.at("nms_iou");
    c.rpn.image_size = c.dataset.image_size;
    c.rpn_train = train_from(merged.at("rpn_train"));
    c.train = train_from(merged.at("train"));
    const auto& s = merged.at("search");
    c.search.threshold = s.at("threshold");
    c.search.max_depth = s.at("max_depth");
    c.search.probe_epochs = s.at("probe_epochs");
    c.search.subsample_fraction = s.at("subsample_fraction");
    c.search.holdout_fraction = s.at("holdout_fraction");
    // merge_patch drops null members, so an absent key means "unset".
    const json m = merged.contains("membership") ? merged.at("membership") : json();
    if (m.is_null()) {
      c.membership.reset();
    } else {
      c.membership = MembershipParams{m.value("slope", 40.0), m.value("center", 0.25)};
    }
    const auto& sa = merged.at("sampling");
    c.sampling.proposals = sa.at("proposals");
    c.sampling.rpn_nms_iou = sa.at("rpn_nms_iou");
    c.sampling.pool = sa.at("pool");
    c.sampling.max_positive = sa.at("max_positive");
    c.sampling.max_background = sa.at("max_background");
    const auto& co = merged.at("count");
    c.count.proposals = co.at("proposals");
    c.count.rpn_nms_iou = co.at("rpn_nms_iou");
    c.count.nms_iou = co.at("nms_iou");
    c.count.score_threshold = co.at("score_threshold");
    c.semantic_partition = merged.at("semantic_partition");
    c.output_dir = merged.at("output_dir").get<std::string>();
    c.workers = merged.at("workers");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  return c;
}

void RunConfig::validate() const {
  const auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  need(train_images > 0, "train_images must be positive");
  need(test_images > 0, "test_images must be positive");
  need(dataset.image_size >= 16, "dataset.image_size must be at least 16");
  need(dataset.min_object_size > 0 && dataset.min_object_size <= dataset.max_object_size,
       "dataset object sizes must satisfy 0 < min <= max");
  need(dataset.detail_contrast >= 0 && dataset.detail_contrast <= 1, "dataset.detail_contrast must be in [0, 1]");
  need(train.epochs > 0 && rpn_train.epochs > 0, "epochs must be positive");
  need(train.batch_size > 0 && rpn_train.batch_size > 0, "batch_size must be positive");
  need(train.initial_lr > 0 && rpn_train.initial_lr > 0, "initial_lr must be positive");
  need(count.nms_iou > 0 && count.nms_iou <= 1, "count.nms_iou must be in (0, 1]");
  need(sampling.pool > 0, "sampling.pool must be positive");
  need(workers >= 0, "workers must be >= 0");
  need(!output_dir.empty(), "output_dir must not be empty");
  try {
    search.validate();
    if (membership) membership->validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return RunConfig::from_json(j, std::move(base));
}

Pipeline::Pipeline(RunConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  cfg_.rpn.image_size = cfg_.dataset.image_size;
  kernels::set_worker_count(cfg_.workers);
  std::filesystem::create_directories(cfg_.output_dir);
  write_json(dir() / "config.json", cfg_.to_json());
}

std::string Pipeline::stamp(const std::string& stage, const json& inputs) const {
  return fmt::format("{:016x}", derive_seed(cfg_.seed, stage + ":" + inputs.dump()));
}

bool Pipeline::fresh(const std::string& stage, const std::string& stamp) const {
  std::ifstream in(dir() / "stages.json");
  if (!in) return false;
  try {
    return json::parse(in).value(stage, std::string()) == stamp;
  } catch (const json::exception&) {
    return false;
  }
}

void Pipeline::record(const std::string& stage, const std::string& stamp) {
  json j = json::object();
  if (std::ifstream in(dir() / "stages.json"); in) {
    try {
      j = json::parse(in);
    } catch (const json::exception&) {
      j = json::object();
    }
  }
  j[stage] = stamp;
  write_json(dir() / "stages.json", j);
}

void Pipeline::write_json(const std::filesystem::path& file, const json& j) const {
  std::ofstream out(file);
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("cannot write " + file.string());
}

const DatasetManifest& Pipeline::train_data() {
  if (train_) return *train_;
  const json slice = {{"seed", cfg_.seed},
                      {"dataset", cfg_.to_json().at("dataset")},
                      {"train", cfg_.train_images},
                      {"test", cfg_.test_images}};
  data_stamp_ = stamp("gen-data", slice);
  const auto data_dir = dir() / "data";
  if (fresh("gen-data", data_stamp_) && std::filesystem::exists(data_dir / "train.json") &&
      std::filesystem::exists(data_dir / "test.json")) {
    spdlog::info("gen-data: loading {}", data_dir.string());
    train_ = load_dataset(data_dir, "train");
    test_ = load_dataset(data_dir, "test");
    return *train_;
  }
  DatasetConfig dc = cfg_.dataset;
  dc.num_images = cfg_.train_images;
  train_ = generate_dataset(cfg_.seed, dc, "train");
  dc.num_images = cfg_.test_images;
  test_ = generate_dataset(cfg_.seed, dc, "test");
  save_dataset(*train_, data_dir);
  save_dataset(*test_, data_dir);
  record("gen-data", data_stamp_);
  spdlog::info("gen-data: {} train / {} test images, {} train objects", train_->samples.size(),
               test_->samples.size(), train_->object_count());
  return *train_;
}

const DatasetManifest& Pipeline::test_data() {
  train_data();
  return *test_;
}

const Rpn& Pipeline::rpn() {
  if (rpn_) return *rpn_;
  const auto& data = train_data();
  const json j = cfg_.to_json();
  rpn_stamp_ = stamp("train-rpn", {{"data", data_stamp_}, {"rpn", j.at("rpn")}, {"train", j.at("rpn_train")}});
  const auto file = dir() / "rpn.hcnt";
  if (fresh("train-rpn", rpn_stamp_) && std::filesystem::exists(file)) {
    spdlog::info("train-rpn: loading {}", file.string());
    rpn_ = load_rpn(file);
    return *rpn_;
  }
  RpnTrainReport report;
  rpn_ = train_rpn(data, cfg_.rpn_train, cfg_.rpn, derive_seed(cfg_.seed, "rpn"), &report);
  save_rpn(file, *rpn_);
  record("train-rpn", rpn_stamp_);
  spdlog::info("train-rpn: proposal recall {:.3f} on the test split",
               proposal_recall(*rpn_, test_data(), cfg_.sampling.proposals));
  return *rpn_;
}

Hierarchy Pipeline::built_tree(const std::string& name, const std::optional<json>& partition) {
  const auto& data = train_data();
  const auto& proposer = rpn();
  const json j = cfg_.to_json();
  const std::string st = stamp("build-tree/" + name, {{"rpn", rpn_stamp_},
                                                      {"search", j.at("search")},
                                                      {"train", j.at("train")},
                                                      {"membership", j.at("membership")},
                                                      {"sampling", j.at("sampling")},
                                                      {"partition", partition ? *partition : json()}});
  const auto tree_dir = dir() / (name + "-built");
  if (fresh("build-tree/" + name, st) && std::filesystem::exists(tree_dir / "tree.json")) {
    spdlog::info("build-tree: loading {}", tree_dir.string());
    return load_hierarchy(tree_dir);
  }
  BuildConfig bc;
  bc.search = cfg_.search;
  bc.train = cfg_.train;
  bc.sampling = cfg_.sampling;
  bc.membership = cfg_.membership;
  bc.seed = derive_seed(cfg_.seed, "build/" + name);
  bc.checkpoint_dir = dir() / (name + "-checkpoints");
  Hierarchy h = partition ? build_hierarchy_from_partition(data, proposer, *partition, bc)
                          : build_hierarchy(data, proposer, bc);
  std::filesystem::remove_all(tree_dir);
  save_hierarchy(tree_dir, h);
  record("build-tree/" + name, st);
  spdlog::info("build-tree {}: {} (depth {}, {} internal nodes)", name, h.partition().dump(), h.depth(),
               h.internal_count());
  return h;
}

Hierarchy Pipeline::trained_tree(const std::string& name, const std::optional<json>& partition) {
  Hierarchy h = built_tree(name, partition);
  std::ifstream in(dir() / (name + "-built") / "tree.json");
  const std::string built = json::parse(in).dump();
  const std::string st = stamp("train-tree/" + name, {{"built", built}, {"train", cfg_.to_json().at("train")}});
  const auto tree_dir = dir() / name;
  if (fresh("train-tree/" + name, st) && std::filesystem::exists(tree_dir / "tree.json")) {
    spdlog::info("train-tree: loading {}", tree_dir.string());
    return load_hierarchy(tree_dir);
  }
  train_tree(h, train_data(), cfg_.train, cfg_.sampling, derive_seed(cfg_.seed, "train/" + name));
  std::filesystem::remove_all(tree_dir);
  save_hierarchy(tree_dir, h);
  record("train-tree/" + name, st);
  return h;
}

const FlatDetector& Pipeline::flat() {
  if (flat_) return *flat_;
  const auto& data = train_data();
  const auto& proposer = rpn();
  const json j = cfg_.to_json();
  const std::string st = stamp("train-flat", {{"rpn", rpn_stamp_}, {"train", j.at("train")}, {"sampling", j.at("sampling")}});
  const auto flat_dir = dir() / "flat";
  if (fresh("train-flat", st) && std::filesystem::exists(flat_dir / "flat.hcnt")) {
    spdlog::info("train-flat: loading {}", flat_dir.string());
    flat_ = load_flat_detector(flat_dir);
    return *flat_;
  }
  flat_ = train_flat_detector(proposer, data, cfg_.train, cfg_.sampling, derive_seed(cfg_.seed, "flat"));
  save_flat_detector(flat_dir, *flat_);
  record("train-flat", st);
  return *flat_;
}

Evaluation Pipeline::evaluate_tree(const Hierarchy& h, const std::string& name) {
  Evaluation ev = evaluate_hierarchy(h, test_data(), cfg_.count);
  write_json(dir() / ("eval_" + name + ".json"), ev.to_json());
  spdlog::info("evaluate {}: rmse {:.4f}, mAP {:.4f}, mean ops {:.4g}", name, ev.summary.rmse, ev.summary.map,
               ev.summary.mean_ops);
  return ev;
}

Evaluation Pipeline::evaluate_flat_detector() {
  Evaluation ev = evaluate_flat(flat(), test_data(), cfg_.count);
  write_json(dir() / "eval_flat.json", ev.to_json());
  spdlog::info("evaluate flat: rmse {:.4f}, mAP {:.4f}, mean ops {:.4g}", ev.summary.rmse, ev.summary.map,
               ev.summary.mean_ops);
  return ev;
}

CompareReport Pipeline::compare() {
  const Hierarchy tree = trained_tree("tree");
  const Hierarchy semantic = trained_tree("semantic-tree", cfg_.semantic_partition);
  const FlatDetector& baseline = flat();
  const Evaluation eh = evaluate_tree(tree, "tree");
  const Evaluation es = evaluate_tree(semantic, "semantic-tree");
  const Evaluation ef = evaluate_flat_detector();
  const std::uint64_t flat_memory = flat_cost_report(baseline, cfg_.count).path_memory_bytes;
  CompareReport report =
      make_compare_report(eh, longest_path_memory(tree), ef, flat_memory, es, longest_path_memory(semantic));
  json j = report.to_json();
  j["partition"] = tree.partition();
  j["semantic_partition"] = semantic.partition();
  j["families"] = json::array();
  for (const auto& fam : tree.categories.families()) {
    json names = json::array();
    for (int c : fam) names.push_back(tree.categories.names[static_cast<std::size_t>(c)]);
    j["families"].push_back(names);
  }
  write_json(dir() / "compare.json", j);
  render_report_figures(dir() / "figures",
                        {{"hierarchical", eh.summary.ratios}, {"flat", ef.summary.ratios}, {"semantic tree", es.summary.ratios}},
                        {{"flat", ef.summary.mean_ops, static_cast<double>(flat_memory)},
                         {"hierarchical", eh.summary.mean_ops, static_cast<double>(longest_path_memory(tree))},
                         {"semantic tree", es.summary.mean_ops, static_cast<double>(longest_path_memory(semantic))}});
  return report;
}

}  // namespace hcount
