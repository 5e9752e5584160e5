#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "hcount/dataset.hpp"
#include "hcount/rng.hpp"
#include "temp_dir.hpp"

using namespace hcount;

namespace {

DatasetConfig small_config(std::size_t n) {
  DatasetConfig cfg;
  cfg.num_images = n;
  return cfg;
}

}  // namespace

TEST_CASE("default categories form three families") {
  const auto cats = default_categories();
  CHECK(cats.size() == 8);
  CHECK(cats.families().size() == 3);
  CHECK(cats.index_of("disc-dot") == 1);
  CHECK_THROWS_AS(cats.index_of("unicorn"), std::out_of_range);
  for (std::size_t a = 0; a < cats.size(); ++a) {
    for (std::size_t b = 0; b < cats.size(); ++b) {
      if (cats.family_of[a] != cats.family_of[b]) continue;
      CHECK(cats.styles[a].silhouette == cats.styles[b].silhouette);
      CHECK(cats.styles[a].fill == cats.styles[b].fill);
    }
  }
}

TEST_CASE("max_objects zero gives empty images") {
  auto cfg = small_config(20);
  cfg.max_objects = 0;
  const auto m = generate_dataset(3, cfg);
  CHECK(m.samples.size() == 20);
  for (const auto& s : m.samples) CHECK(s.annotations.empty());
}

TEST_CASE("generation is deterministic and independent of thread count") {
  const auto a = generate_dataset(5, small_config(30));
  const auto b = generate_dataset(5, small_config(30));
  CHECK(a == b);
  CHECK(dataset_checksum(a) == dataset_checksum(b));
  CHECK(dataset_checksum(a) != dataset_checksum(generate_dataset(6, small_config(30))));
}

TEST_CASE("object count replays the documented stream") {
  // Each image's first draw is below(max_objects + 1) from its own stream.
  const auto m = generate_dataset(1, small_config(100));
  std::size_t wanted = 0;
  for (std::uint64_t i = 0; i < 100; ++i) wanted += Rng(derive_seed(1, "image/train", i)).below(6);
  CHECK(m.object_count() <= wanted);
  CHECK(m.object_count() + 5 >= wanted);  // placement drops are rare
  CHECK(m.object_count() == 227);         // golden value
}

TEST_CASE("samples satisfy the data invariants") {
  auto cfg = small_config(200);
  const auto m = generate_dataset(9, cfg);
  std::vector<int> seen(cfg.categories.size(), 0);
  for (const auto& s : m.samples) {
    CHECK(s.pixels.shape() == Shape{3, 64, 64});
    CHECK(s.annotations.size() <= cfg.max_objects);
    for (float v : s.pixels.values()) {
      REQUIRE(v >= 0.0f);
      REQUIRE(v <= 1.0f);
    }
    for (std::size_t i = 0; i < s.annotations.size(); ++i) {
      const auto& a = s.annotations[i];
      CHECK(a.box.valid());
      CHECK(a.box.x_min >= 0);
      CHECK(a.box.y_min >= 0);
      CHECK(a.box.x_max <= 64);
      CHECK(a.box.y_max <= 64);
      CHECK(a.box.width() >= cfg.min_object_size - 2);
      ++seen[static_cast<std::size_t>(a.category)];
      for (std::size_t j = 0; j < i; ++j) CHECK(iou(a.box, s.annotations[j].box) <= cfg.max_overlap_iou);
    }
  }
  for (int c : seen) CHECK(c > 0);
}

TEST_CASE("generator preconditions") {
  auto cfg = small_config(1);
  cfg.image_size = 16;
  CHECK_THROWS_AS(generate_dataset(1, cfg), DatasetError);
  cfg = small_config(1);
  cfg.categories.family_of = {0, 0, 0, 1, 2, 3, 4, 5};
  CHECK_THROWS_AS(generate_dataset(1, cfg), DatasetError);
}

TEST_CASE("save and load round-trip") {
  testing::TempDir dir;
  SUBCASE("empty dataset") {
    const auto m = generate_dataset(2, small_config(0));
    save_dataset(m, dir.path());
    CHECK(load_dataset(dir.path()) == m);
  }
  SUBCASE("100 images") {
    const auto m = generate_dataset(2, small_config(100), "test");
    save_dataset(m, dir.path());
    const auto back = load_dataset(dir.path(), "test");
    CHECK(back == m);
    CHECK(dataset_checksum(back) == dataset_checksum(m));
  }
}

TEST_CASE("load errors name the offending entry") {
  testing::TempDir dir;
  const auto m = generate_dataset(4, small_config(5));
  save_dataset(m, dir.path());

  SUBCASE("truncated image") {
    const auto file = dir.path() / (m.samples[3].id + ".ppm");
    std::filesystem::resize_file(file, std::filesystem::file_size(file) / 2);
    try {
      load_dataset(dir.path());
      FAIL("expected a load error");
    } catch (const DatasetError& e) {
      CHECK(std::string(e.what()).find(m.samples[3].id + ".ppm") != std::string::npos);
    }
  }
  SUBCASE("missing image") {
    std::filesystem::remove(dir.path() / (m.samples[1].id + ".ppm"));
    CHECK_THROWS_WITH_AS(load_dataset(dir.path()), doctest::Contains(m.samples[1].id.c_str()), DatasetError);
  }
  SUBCASE("malformed box record") {
    const auto manifest = dir.path() / "train.json";
    std::ifstream in(manifest);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    const auto pos = text.find("\"boxes\": [");
    REQUIRE(pos != std::string::npos);
    text.insert(pos + 10, "[1, 2, \"x\"],");
    std::ofstream(manifest) << text;
    CHECK_THROWS_WITH_AS(load_dataset(dir.path()), doctest::Contains("malformed box record"), DatasetError);
  }
  SUBCASE("missing manifest") {
    CHECK_THROWS_AS(load_dataset(dir.path(), "nope"), DatasetError);
  }
}

TEST_CASE("ppm round trip is exact") {
  testing::TempDir dir;
  const auto m = generate_dataset(8, small_config(1));
  write_ppm(dir.path() / "a.ppm", m.samples[0].pixels);
  CHECK(read_ppm(dir.path() / "a.ppm") == m.samples[0].pixels);
}
