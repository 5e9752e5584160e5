#include "hcount/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "hcount/rng.hpp"

namespace hcount {

namespace {

constexpr std::array<std::pair<Silhouette, const char*>, 6> kSilhouettes{{
    {Silhouette::Circle, "circle"},
    {Silhouette::Square, "square"},
    {Silhouette::Triangle, "triangle"},
    {Silhouette::Diamond, "diamond"},
    {Silhouette::Pentagon, "pentagon"},
    {Silhouette::Hexagon, "hexagon"},
}};

constexpr std::array<std::pair<DetailMark, const char*>, 4> kMarks{{
    {DetailMark::None, "none"},
    {DetailMark::Dot, "dot"},
    {DetailMark::Bar, "bar"},
    {DetailMark::Ring, "ring"},
}};

}  // namespace

std::string to_string(Silhouette s) {
  for (auto [k, n] : kSilhouettes)
    if (k == s) return n;
  return "circle";
}

std::string to_string(DetailMark m) {
  for (auto [k, n] : kMarks)
    if (k == m) return n;
  return "none";
}

Silhouette silhouette_from_string(const std::string& s) {
  for (auto [k, n] : kSilhouettes)
    if (s == n) return k;
  throw DatasetError("unknown silhouette '" + s + "'");
}

DetailMark mark_from_string(const std::string& s) {
  for (auto [k, n] : kMarks)
    if (s == n) return k;
  throw DatasetError("unknown detail mark '" + s + "'");
}

int CategorySet::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<int>(i);
  std::string valid;
  for (const auto& n : names) valid += (valid.empty() ? "" : ", ") + n;
  throw std::out_of_range("unknown category '" + name + "' (valid: " + valid + ")");
}

std::vector<std::vector<int>> CategorySet::families() const {
  int count = 0;
  for (int f : family_of) count = std::max(count, f + 1);
  std::vector<std::vector<int>> out(static_cast<std::size_t>(count));
  for (std::size_t c = 0; c < family_of.size(); ++c) {
    out[static_cast<std::size_t>(family_of[c])].push_back(static_cast<int>(c));
  }
  return out;
}

CategorySet default_categories() {
  CategorySet set;
  set.family_names = {"red-discs", "green-blocks", "blue-wedges"};
  const std::array<std::array<double, 3>, 3> fills{{{0.85, 0.22, 0.18}, {0.22, 0.72, 0.26}, {0.20, 0.32, 0.86}}};
  const std::array<Silhouette, 3> silhouettes{Silhouette::Circle, Silhouette::Square, Silhouette::Triangle};
  const std::array<const char*, 3> stems{"disc", "block", "wedge"};
  const std::array<std::size_t, 3> sizes{3, 3, 2};
  const std::array<DetailMark, 3> marks{DetailMark::None, DetailMark::Dot, DetailMark::Bar};
  for (std::size_t f = 0; f < 3; ++f) {
    for (std::size_t m = 0; m < sizes[f]; ++m) {
      set.names.push_back(std::string(stems[f]) + (m == 0 ? "" : "-" + to_string(marks[m])));
      set.family_of.push_back(static_cast<int>(f));
      set.styles.push_back({silhouettes[f], fills[f], marks[m]});
    }
  }
  return set;
}

std::size_t DatasetManifest::object_count() const {
  std::size_t n = 0;
  for (const auto& s : samples) n += s.annotations.size();
  return n;
}

// Rendering

namespace {

// (u, v) are object-local coordinates scaled so the silhouette spans [-1, 1].
bool inside_silhouette(Silhouette s, double u, double v) {
  switch (s) {
    case Silhouette::Circle:
      return u * u + v * v <= 1.0;
    case Silhouette::Square:
      return std::abs(u) <= 1.0 && std::abs(v) <= 1.0;
    case Silhouette::Triangle:
      return v <= 1.0 && v >= -1.0 && std::abs(u) <= (v + 1.0) / 2.0;
    case Silhouette::Diamond:
      return std::abs(u) + std::abs(v) <= 1.0;
    case Silhouette::Pentagon:
    case Silhouette::Hexagon: {
      const double sides = s == Silhouette::Pentagon ? 5.0 : 6.0;
      const double r = std::hypot(u, v);
      if (r == 0.0) return true;
      const double sector = 2.0 * std::numbers::pi / sides;
      double theta = std::atan2(u, -v);  // 0 at the top vertex
      theta = std::fmod(theta + 2.0 * std::numbers::pi, sector);
      return r <= std::cos(std::numbers::pi / sides) / std::cos(theta - sector / 2.0);
    }
  }
  return false;
}

bool inside_mark(DetailMark m, Silhouette s, double u, double v) {
  const double cv = s == Silhouette::Triangle ? 0.33 : 0.0;
  const double dv = v - cv;
  switch (m) {
    case DetailMark::None:
      return false;
    case DetailMark::Dot:
      return u * u + dv * dv <= 0.30 * 0.30;
    case DetailMark::Bar:
      return std::abs(u) <= 0.55 && std::abs(dv) <= 0.14;
    case DetailMark::Ring: {
      const double r2 = u * u + dv * dv;
      return r2 >= 0.28 * 0.28 && r2 <= 0.46 * 0.46;
    }
  }
  return false;
}

struct Placement {
  int category = 0;
  double cx = 0, cy = 0, half = 0;
  BBox box;
  std::array<double, 3> fill{};
};

BBox tight_box(Silhouette s, double cx, double cy, double half, std::size_t size) {
  double x0 = 1e9, y0 = 1e9, x1 = -1e9, y1 = -1e9;
  const auto lo_x = static_cast<std::ptrdiff_t>(std::floor(cx - half - 1));
  const auto hi_x = static_cast<std::ptrdiff_t>(std::ceil(cx + half + 1));
  const auto lo_y = static_cast<std::ptrdiff_t>(std::floor(cy - half - 1));
  const auto hi_y = static_cast<std::ptrdiff_t>(std::ceil(cy + half + 1));
  const auto n = static_cast<std::ptrdiff_t>(size);
  for (auto y = std::max<std::ptrdiff_t>(lo_y, 0); y <= std::min(hi_y, n - 1); ++y) {
    for (auto x = std::max<std::ptrdiff_t>(lo_x, 0); x <= std::min(hi_x, n - 1); ++x) {
      const double u = (static_cast<double>(x) + 0.5 - cx) / half;
      const double v = (static_cast<double>(y) + 0.5 - cy) / half;
      if (!inside_silhouette(s, u, v)) continue;
      x0 = std::min(x0, static_cast<double>(x));
      y0 = std::min(y0, static_cast<double>(y));
      x1 = std::max(x1, static_cast<double>(x + 1));
      y1 = std::max(y1, static_cast<double>(y + 1));
    }
  }
  if (x1 < x0) return {};
  return {x0, y0, x1, y1};
}

ImageSample render_image(std::uint64_t stream_seed, const DatasetConfig& cfg, std::string id) {
  Rng rng(stream_seed);
  const std::size_t size = cfg.image_size;
  const auto& cats = cfg.categories;
  const std::size_t wanted = static_cast<std::size_t>(rng.below(cfg.max_objects + 1));

  std::vector<Placement> placed;
  for (std::size_t k = 0; k < wanted; ++k) {
    const int category = static_cast<int>(rng.below(cats.size()));
    const ShapeStyle& style = cats.styles[static_cast<std::size_t>(category)];
    std::array<double, 3> fill = style.fill;
    for (auto& ch : fill) ch = std::clamp(ch + rng.uniform(-cfg.colour_jitter, cfg.colour_jitter), 0.0, 1.0);
    for (std::size_t attempt = 0; attempt < cfg.placement_retries; ++attempt) {
      const double side = rng.uniform(cfg.min_object_size, cfg.max_object_size);
      const double half = side / 2.0;
      const double cx = rng.uniform(half, static_cast<double>(size) - half);
      const double cy = rng.uniform(half, static_cast<double>(size) - half);
      const BBox box = tight_box(style.silhouette, cx, cy, half, size);
      if (!box.valid()) continue;
      const bool clear = std::none_of(placed.begin(), placed.end(), [&](const Placement& p) {
        return iou(p.box, box) > cfg.max_overlap_iou;
      });
      if (!clear) continue;
      placed.push_back({category, cx, cy, half, box, fill});
      break;
    }
  }

  ImageSample sample;
  sample.id = std::move(id);
  sample.pixels = Tensor({3, size, size});
  const double base = rng.uniform(0.35, 0.65);
  std::array<double, 3> background{};
  for (auto& ch : background) ch = base + rng.uniform(-0.05, 0.05);
  std::vector<double> img(3 * size * size);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < size * size; ++i) img[c * size * size + i] = background[c];

  for (const auto& p : placed) {
    const ShapeStyle& style = cats.styles[static_cast<std::size_t>(p.category)];
    std::array<double, 3> mark_colour{};
    for (std::size_t c = 0; c < 3; ++c) mark_colour[c] = p.fill[c] + cfg.detail_contrast * (1.0 - p.fill[c]);
    for (auto y = static_cast<std::size_t>(p.box.y_min); y < static_cast<std::size_t>(p.box.y_max); ++y) {
      for (auto x = static_cast<std::size_t>(p.box.x_min); x < static_cast<std::size_t>(p.box.x_max); ++x) {
        const double u = (static_cast<double>(x) + 0.5 - p.cx) / p.half;
        const double v = (static_cast<double>(y) + 0.5 - p.cy) / p.half;
        if (!inside_silhouette(style.silhouette, u, v)) continue;
        const auto& colour = inside_mark(style.mark, style.silhouette, u, v) ? mark_colour : p.fill;
        for (std::size_t c = 0; c < 3; ++c) img[(c * size + y) * size + x] = colour[c];
      }
    }
    sample.annotations.push_back({p.box, p.category});
  }

  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = std::clamp(img[i] + cfg.pixel_noise * rng.normal(), 0.0, 1.0);
    sample.pixels[i] = static_cast<float>(std::round(v * 255.0) / 255.0);
  }
  return sample;
}

}  // namespace

DatasetManifest generate_dataset(std::uint64_t seed, const DatasetConfig& config, const std::string& split) {
  if (config.image_size < 32) throw DatasetError("image_size must be at least 32");
  if (config.categories.size() == 0 || config.categories.styles.size() != config.categories.size() ||
      config.categories.family_of.size() != config.categories.size()) {
    throw DatasetError("category set is empty or inconsistent");
  }
  std::size_t rich_families = 0;
  for (const auto& f : config.categories.families()) rich_families += f.size() >= 2 ? 1 : 0;
  if (rich_families < 2) throw DatasetError("need at least two families with two or more categories each");
  if (config.max_object_size > static_cast<double>(config.image_size) ||
      config.min_object_size < 2 || config.min_object_size > config.max_object_size) {
    throw DatasetError("object size range does not fit the image");
  }
  DatasetManifest manifest;
  manifest.categories = config.categories;
  manifest.split = split;
  manifest.seed = seed;
  manifest.config = config;
  manifest.samples.resize(config.num_images);
  const auto count = static_cast<std::ptrdiff_t>(config.num_images);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    char id[64];
    std::snprintf(id, sizeof id, "%s_%05td", split.c_str(), i);
    manifest.samples[static_cast<std::size_t>(i)] =
        render_image(derive_seed(seed, "image/" + split, static_cast<std::uint64_t>(i)), config, id);
  }
  return manifest;
}

std::vector<int> label_rois(const std::vector<BBox>& rois, const std::vector<Annotation>& annotations,
                            double threshold) {
  std::vector<int> labels(rois.size(), kBackground);
  for (std::size_t r = 0; r < rois.size(); ++r) {
    double best = -1.0;
    int best_cat = kBackground;
    for (const auto& a : annotations) {
      const double o = iou(rois[r], a.box);
      if (o > best) {
        best = o;
        best_cat = a.category;
      }
    }
    if (best >= threshold) labels[r] = best_cat;
  }
  return labels;
}

// Persistence

void write_ppm(const std::filesystem::path& path, const Tensor& pixels) {
  if (pixels.rank() != 3 || pixels.dim(0) != 3) throw DatasetError("PPM needs a 3 x H x W tensor");
  const std::size_t h = pixels.dim(1), w = pixels.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError("cannot write " + path.string());
  out << "P6\n" << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> bytes(3 * w * h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        bytes[(y * w + x) * 3 + c] =
            static_cast<unsigned char>(std::lround(std::clamp(pixels.at(c, y, x), 0.0f, 1.0f) * 255.0f));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DatasetError("failed writing " + path.string());
}

Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("missing image file " + path.string());
  auto token = [&]() {
    std::string t;
    char ch = 0;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
        continue;
      }
      t += ch;
    }
    return t;
  };
  if (token() != "P6") throw DatasetError(path.string() + ": not a binary PPM (P6)");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw DatasetError(path.string() + ": malformed PPM header");
  }
  if (maxval != 255 || w == 0 || h == 0) throw DatasetError(path.string() + ": unsupported PPM header");
  std::vector<unsigned char> bytes(3 * w * h);
  if (!in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
    throw DatasetError(path.string() + ": truncated image data");
  }
  Tensor pixels({3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        pixels.at(c, y, x) = static_cast<float>(bytes[(y * w + x) * 3 + c]) / 255.0f;
  return pixels;
}

namespace {

nlohmann::json config_to_json(const DatasetConfig& c) {
  return {{"num_images", c.num_images},         {"image_size", c.image_size},
          {"max_objects", c.max_objects},       {"min_object_size", c.min_object_size},
          {"max_object_size", c.max_object_size}, {"detail_contrast", c.detail_contrast},
          {"pixel_noise", c.pixel_noise},       {"colour_jitter", c.colour_jitter},
          {"max_overlap_iou", c.max_overlap_iou}, {"placement_retries", c.placement_retries}};
}

nlohmann::json categories_to_json(const CategorySet& cats) {
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t i = 0; i < cats.size(); ++i) {
    const auto& s = cats.styles[i];
    out.push_back({{"name", cats.names[i]},
                   {"family", cats.family_of[i]},
                   {"silhouette", to_string(s.silhouette)},
                   {"fill", s.fill},
                   {"mark", to_string(s.mark)}});
  }
  return out;
}

CategorySet categories_from_json(const nlohmann::json& list) {
  CategorySet cats;
  for (const auto& cj : list) {
    cats.names.push_back(cj.at("name").get<std::string>());
    cats.family_of.push_back(cj.at("family").get<int>());
    cats.styles.push_back({silhouette_from_string(cj.at("silhouette").get<std::string>()),
                           cj.at("fill").get<std::array<double, 3>>(),
                           mark_from_string(cj.at("mark").get<std::string>())});
  }
  return cats;
}

}  // namespace

nlohmann::json category_set_to_json(const CategorySet& cats) {
  return {{"categories", categories_to_json(cats)}, {"family_names", cats.family_names}};
}

CategorySet category_set_from_json(const nlohmann::json& j) {
  CategorySet cats = categories_from_json(j.at("categories"));
  cats.family_names = j.at("family_names").get<std::vector<std::string>>();
  return cats;
}

void save_dataset(const DatasetManifest& manifest, const std::filesystem::path& directory) {
  std::filesystem::create_directories(directory);
  nlohmann::json j;
  j["format"] = "hcount-dataset";
  j["version"] = 1;
  j["split"] = manifest.split;
  j["seed"] = manifest.seed;
  j["config"] = config_to_json(manifest.config);
  j["categories"] = categories_to_json(manifest.categories);
  nlohmann::json families = nlohmann::json::array();
  const auto fam = manifest.categories.families();
  for (std::size_t f = 0; f < fam.size(); ++f) {
    const std::string name =
        f < manifest.categories.family_names.size() ? manifest.categories.family_names[f] : "family" + std::to_string(f);
    families.push_back({{"name", name}, {"categories", fam[f]}});
  }
  j["families"] = families;
  j["samples"] = nlohmann::json::array();
  for (const auto& s : manifest.samples) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& a : s.annotations) {
      boxes.push_back({a.box.x_min, a.box.y_min, a.box.x_max, a.box.y_max, a.category});
    }
    const std::string file = s.id + ".ppm";
    j["samples"].push_back({{"id", s.id}, {"image", file}, {"boxes", boxes}});
    write_ppm(directory / file, s.pixels);
  }
  std::ofstream out(directory / (manifest.split + ".json"));
  if (!out) throw DatasetError("cannot write manifest in " + directory.string());
  out << j.dump(1) << '\n';
}

DatasetManifest load_dataset(const std::filesystem::path& directory, const std::string& split) {
  const auto manifest_path = directory / (split + ".json");
  std::ifstream in(manifest_path);
  if (!in) throw DatasetError("missing manifest " + manifest_path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(manifest_path.string() + ": malformed JSON: " + e.what());
  }

  DatasetManifest m;
  try {
    m.split = j.at("split").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    const auto& c = j.at("config");
    m.config.num_images = c.at("num_images");
    m.config.image_size = c.at("image_size");
    m.config.max_objects = c.at("max_objects");
    m.config.min_object_size = c.at("min_object_size");
    m.config.max_object_size = c.at("max_object_size");
    m.config.detail_contrast = c.at("detail_contrast");
    m.config.pixel_noise = c.at("pixel_noise");
    m.config.colour_jitter = c.at("colour_jitter");
    m.config.max_overlap_iou = c.at("max_overlap_iou");
    m.config.placement_retries = c.at("placement_retries");
    CategorySet cats = categories_from_json(j.at("categories"));
    for (const auto& fj : j.at("families")) cats.family_names.push_back(fj.at("name").get<std::string>());
    m.categories = cats;
    m.config.categories = cats;
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(manifest_path.string() + ": malformed header: " + e.what());
  }

  const auto& samples = j.at("samples");
  m.samples.resize(samples.size());
  const int num_categories = static_cast<int>(m.categories.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& sj = samples[i];
    const std::string where = manifest_path.string() + ": sample " + std::to_string(i);
    ImageSample& s = m.samples[i];
    if (!sj.is_object() || !sj.contains("image") || !sj["image"].is_string()) {
      throw DatasetError(where + ": missing image reference");
    }
    s.id = sj.value("id", std::filesystem::path(sj["image"].get<std::string>()).stem().string());
    const std::string where_id = where + " (" + s.id + ")";
    if (!sj.contains("boxes") || !sj["boxes"].is_array()) throw DatasetError(where_id + ": missing boxes");
    for (const auto& bj : sj["boxes"]) {
      if (!bj.is_array() || bj.size() != 5 ||
          !std::all_of(bj.begin(), bj.end(), [](const nlohmann::json& v) { return v.is_number(); })) {
        throw DatasetError(where_id + ": malformed box record " + bj.dump());
      }
      Annotation a{{bj[0].get<double>(), bj[1].get<double>(), bj[2].get<double>(), bj[3].get<double>()},
                   bj[4].get<int>()};
      if (!a.box.valid() || a.category < 0 || a.category >= num_categories) {
        throw DatasetError(where_id + ": invalid box record " + bj.dump());
      }
      s.annotations.push_back(a);
    }
    try {
      s.pixels = read_ppm(directory / sj["image"].get<std::string>());
    } catch (const DatasetError& e) {
      throw DatasetError(where_id + ": " + e.what());
    }
    const Shape expected{3, m.config.image_size, m.config.image_size};
    if (s.pixels.shape() != expected) {
      throw DatasetError(where_id + ": image is " + shape_to_string(s.pixels.shape()) + ", manifest declares " +
                         shape_to_string(expected));
    }
  }
  return m;
}

std::uint64_t dataset_checksum(const DatasetManifest& manifest) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& s : manifest.samples) {
    for (float v : s.pixels.values()) mix(static_cast<std::uint64_t>(std::lround(v * 255.0f)));
    for (const auto& a : s.annotations) {
      mix(static_cast<std::uint64_t>(a.box.x_min));
      mix(static_cast<std::uint64_t>(a.box.y_min));
      mix(static_cast<std::uint64_t>(a.box.x_max));
      mix(static_cast<std::uint64_t>(a.box.y_max));
      mix(static_cast<std::uint64_t>(a.category));
    }
  }
  return h;
}

}  // namespace hcount
