#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "hcount/geometry.hpp"
#include "hcount/tensor.hpp"

namespace hcount {

/// Category index used by classifiers for "no object". Never a member of a
/// CategorySet.
inline constexpr int kBackground = -1;

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Silhouette { Circle, Square, Triangle, Diamond, Pentagon, Hexagon };
enum class DetailMark { None, Dot, Bar, Ring };

std::string to_string(Silhouette s);
std::string to_string(DetailMark m);
Silhouette silhouette_from_string(const std::string& s);
DetailMark mark_from_string(const std::string& s);

/// How the generator draws one category.
struct ShapeStyle {
  Silhouette silhouette = Silhouette::Circle;
  std::array<double, 3> fill{0.8, 0.2, 0.2};
  DetailMark mark = DetailMark::None;
  friend bool operator==(const ShapeStyle&, const ShapeStyle&) = default;
};

struct CategorySet {
  std::vector<std::string> names;
  /// Generator metadata: family index per category.
  std::vector<int> family_of;
  std::vector<std::string> family_names;
  std::vector<ShapeStyle> styles;

  std::size_t size() const { return names.size(); }
  /// Index of `name`; throws std::out_of_range listing valid names.
  int index_of(const std::string& name) const;
  std::vector<std::vector<int>> families() const;
  friend bool operator==(const CategorySet&, const CategorySet&) = default;
};

nlohmann::json category_set_to_json(const CategorySet& cats);
CategorySet category_set_from_json(const nlohmann::json& j);

/// Eight categories in three families: a family shares fill colour and
/// silhouette, its members differ only by a small interior mark.
CategorySet default_categories();

struct Annotation {
  BBox box;
  int category = 0;
  friend bool operator==(const Annotation&, const Annotation&) = default;
};

struct ImageSample {
  Tensor pixels;  // 3 x H x W, values k/255
  std::vector<Annotation> annotations;
  std::string id;
  friend bool operator==(const ImageSample&, const ImageSample&) = default;
};

struct DatasetConfig {
  std::size_t num_images = 100;
  std::size_t image_size = 64;
  std::size_t max_objects = 5;
  double min_object_size = 14;
  double max_object_size = 34;
  /// Blend factor between the fill colour and white for interior marks.
  double detail_contrast = 0.35;
  double pixel_noise = 0.03;
  double colour_jitter = 0.06;
  double max_overlap_iou = 0.3;
  std::size_t placement_retries = 40;
  CategorySet categories = default_categories();
  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

struct DatasetManifest {
  CategorySet categories;
  std::vector<ImageSample> samples;
  std::string split = "train";
  std::uint64_t seed = 0;
  DatasetConfig config;

  std::size_t object_count() const;
  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// Deterministic given (seed, split, config). Image i draws from its own stream
/// derive_seed(seed, "image/<split>", i); its first draw is the object count,
/// uniform in [0, max_objects]. Placement that keeps failing the overlap limit
/// drops the object.
DatasetManifest generate_dataset(std::uint64_t seed, const DatasetConfig& config,
                                 const std::string& split = "train");

/// Per-RoI label: category of the ground truth with the largest IoU if that
/// IoU >= threshold (ties: lowest ground-truth index), else kBackground.
inline constexpr double kRoiLabelIou = 0.7;
std::vector<int> label_rois(const std::vector<BBox>& rois, const std::vector<Annotation>& annotations,
                            double threshold = kRoiLabelIou);

/// Writes <dir>/<split>.json plus one binary PPM per sample.
void save_dataset(const DatasetManifest& manifest, const std::filesystem::path& directory);
DatasetManifest load_dataset(const std::filesystem::path& directory, const std::string& split = "train");

void write_ppm(const std::filesystem::path& path, const Tensor& pixels);
Tensor read_ppm(const std::filesystem::path& path);

/// FNV-1a over the quantized pixels and annotations of every sample.
std::uint64_t dataset_checksum(const DatasetManifest& manifest);

}  // namespace hcount
