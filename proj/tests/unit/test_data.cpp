#include "doctest.h"
#include "ptta/data.hpp"

#include <cstdio>
#include <filesystem>
#include <vector>

using namespace ptta;

namespace {

data::DomainShiftSpec toy_spec() {
  data::DomainShiftSpec spec;
  spec.base = data::BaseFamily::Shapes;
  spec.shift = data::ShiftKind::Color;
  spec.severity = 0.7;
  spec.classes = 4;
  spec.per_class_count = 6;
  spec.image_size = 16;
  spec.seed = 11;
  return spec;
}

bool images_equal(const data::Image& a, const data::Image& b) {
  return a.channels == b.channels && a.height == b.height &&
         a.width == b.width && a.pixels == b.pixels;
}

}  // namespace

TEST_CASE("generation is balanced and deterministic per seed") {
  auto spec = toy_spec();
  auto [src, tgt] = data::make_synthetic_shift(spec);
  auto [src2, tgt2] = data::make_synthetic_shift(spec);

  REQUIRE(src.size() == 24);
  REQUIRE(tgt.size() == 24);
  std::vector<int> counts_s(4, 0), counts_t(4, 0);
  for (const int l : src.labels) counts_s[l]++;
  for (const int l : tgt.labels) counts_t[l]++;
  for (int c = 0; c < 4; ++c) {
    CHECK(counts_s[c] == 6);
    CHECK(counts_t[c] == 6);
  }

  for (std::size_t i = 0; i < src.size(); ++i) {
    REQUIRE(images_equal(src.images[i], src2.images[i]));
    REQUIRE(images_equal(tgt.images[i], tgt2.images[i]));
  }

  auto other = spec;
  other.seed = 12;
  auto [src3, tgt3] = data::make_synthetic_shift(other);
  CHECK_FALSE(images_equal(src.images[0], src3.images[0]));

  // pixels live in [0,1] on the 8-bit grid
  for (const double v : tgt.images[0].pixels) {
    REQUIRE(v >= 0.0);
    REQUIRE(v <= 1.0);
    REQUIRE(std::abs(v * 255.0 - std::round(v * 255.0)) < 1e-9);
  }
}

TEST_CASE("severity zero disables the shift") {
  auto spec = toy_spec();
  RngStream rng(5);
  auto [src, tgt] = data::make_synthetic_shift(spec);
  for (auto kind : {data::ShiftKind::Color, data::ShiftKind::Corrupt,
                    data::ShiftKind::Rotate}) {
    auto out = data::apply_shift(src.images[0], kind, 0.0, rng);
    CHECK(images_equal(out, src.images[0]));
  }

  // nonzero severity actually moves pixels
  RngStream rng2(6);
  auto shifted =
      data::apply_shift(src.images[0], data::ShiftKind::Color, 0.8, rng2);
  CHECK_FALSE(images_equal(shifted, src.images[0]));
}

TEST_CASE("shifted domains differ from the source at matching indices") {
  auto spec = toy_spec();
  spec.severity = 0.8;
  for (auto kind : {data::ShiftKind::Color, data::ShiftKind::Corrupt,
                    data::ShiftKind::Rotate}) {
    spec.shift = kind;
    auto [src, tgt] = data::make_synthetic_shift(spec);
    int differing = 0;
    for (std::size_t i = 0; i < src.size(); ++i) {
      if (!images_equal(src.images[i], tgt.images[i])) ++differing;
    }
    CHECK(differing == static_cast<int>(src.size()));
  }
}

TEST_CASE("glyph family renders ten classes") {
  auto spec = toy_spec();
  spec.base = data::BaseFamily::Glyphs;
  spec.classes = 10;
  spec.per_class_count = 2;
  auto [src, tgt] = data::make_synthetic_shift(spec);
  CHECK(src.size() == 20);
  // glyphs are visibly different across classes
  CHECK_FALSE(images_equal(src.images[0], src.images[2]));

  spec.classes = 11;
  CHECK_THROWS_AS((void)data::make_synthetic_shift(spec),
                  std::invalid_argument);
  spec.base = data::BaseFamily::Shapes;
  spec.classes = 9;
  CHECK_THROWS_AS((void)data::make_synthetic_shift(spec),
                  std::invalid_argument);
  spec.classes = 1;
  CHECK_THROWS_AS((void)data::make_synthetic_shift(spec),
                  std::invalid_argument);
}

TEST_CASE("augmentations replay exactly under the same stream") {
  auto spec = toy_spec();
  auto [src, tgt] = data::make_synthetic_shift(spec);
  const auto& img = src.images[3];

  RngStream a1 = derive_stream(7, "aug");
  RngStream a2 = derive_stream(7, "aug");
  CHECK(images_equal(data::weak_augment(img, a1),
                     data::weak_augment(img, a2)));

  RngStream s1 = derive_stream(8, "aug");
  RngStream s2 = derive_stream(8, "aug");
  CHECK(images_equal(data::strong_augment(img, s1),
                     data::strong_augment(img, s2)));
}

TEST_CASE("weak augmentation preserves geometry and range") {
  auto spec = toy_spec();
  auto [src, tgt] = data::make_synthetic_shift(spec);
  RngStream rng(9);
  for (int i = 0; i < 50; ++i) {
    auto out = data::weak_augment(src.images[i % src.size()], rng);
    REQUIRE(out.height == 16);
    REQUIRE(out.width == 16);
    REQUIRE(out.channels == 3);
    for (const double v : out.pixels) {
      REQUIRE(v >= 0.0);
      REQUIRE(v <= 1.0);
    }
  }
}

TEST_CASE("strong augmentation perturbs nearly every draw") {
  auto spec = toy_spec();
  auto [src, tgt] = data::make_synthetic_shift(spec);
  RngStream rng(10);
  int differ = 0;
  for (int i = 0; i < 100; ++i) {
    auto out = data::strong_augment(src.images[i % src.size()], rng);
    for (const double v : out.pixels) {
      REQUIRE(v >= 0.0);
      REQUIRE(v <= 1.0);
    }
    if (!images_equal(out, src.images[i % src.size()])) ++differ;
  }
  CHECK(differ >= 99);
}

TEST_CASE("batching stacks into a CHW tensor") {
  auto spec = toy_spec();
  auto [src, tgt] = data::make_synthetic_shift(spec);
  auto t = data::to_tensor(src, {0, 5, 7});
  CHECK(t.shape() == ad::Shape{3, 3, 16, 16});
  CHECK(t.data()[0] == src.images[0].pixels[0]);
  const std::size_t per = src.images[0].pixels.size();
  CHECK(t.data()[per] == src.images[5].pixels[0]);
  CHECK_THROWS_AS((void)data::to_tensor({}), std::invalid_argument);
}

TEST_CASE("disk cache round-trips exactly") {
  namespace fs = std::filesystem;
  auto spec = toy_spec();
  spec.per_class_count = 3;
  auto [src, tgt] = data::make_synthetic_shift(spec);

  const auto dir = fs::temp_directory_path() / "ptta_data_cache_test";
  fs::remove_all(dir);
  data::save_dataset(tgt, dir.string());
  auto loaded = data::load_dataset(dir.string());

  REQUIRE(loaded.size() == tgt.size());
  CHECK(loaded.num_classes == tgt.num_classes);
  for (std::size_t i = 0; i < tgt.size(); ++i) {
    REQUIRE(loaded.labels[i] == tgt.labels[i]);
    REQUIRE(images_equal(loaded.images[i], tgt.images[i]));
  }
  fs::remove_all(dir);

  CHECK_THROWS_AS((void)data::load_dataset("/nonexistent/ptta"),
                  std::runtime_error);
}
