// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "arcnn/annot.hpp"
#include "arcnn/synth.hpp"

using namespace arcnn;
using synth::SceneConfig;

TEST_CASE("degenerate generator: zero shift and no unpaired objects") {
  SceneConfig config;
  config.width = 64;
  config.height = 48;
  config.min_object_height = 12;
  config.max_object_height = 20;
  config.shift_std_x = 0.0;
  config.shift_std_y = 0.0;
  config.unpaired_rate = 0.0;
  config.seed = 4;
  const synth::Dataset dataset = synth::generate_dataset(config, 20);
  size_t objects = 0;
  for (const synth::Frame& frame : dataset.frames) {
    for (const annot::PairedObject& obj : frame.annotation.objects) {
      ++objects;
      REQUIRE(obj.paired);
      CHECK(*obj.sensed_box == *obj.reference_box);
    }
  }
  CHECK(objects > 0);
}

TEST_CASE("generator shift statistics recover the configured distribution") {
  SceneConfig config;
  config.width = 64;
  config.height = 48;
  config.min_objects = 3;
  config.max_objects = 3;
  config.min_object_height = 10;
  config.max_object_height = 16;
  config.shift_std_x = 2.0;
  config.shift_std_y = 2.0;
  config.unpaired_rate = 0.0;
  config.seed = 9;
  // 10^4 objects
  const synth::Dataset dataset = synth::generate_dataset(config, 3334);
  const auto stats = annot::shift_statistics(dataset.annotations());
  REQUIRE(stats.paired_count >= 10000);
  CHECK(stats.std_x == doctest::Approx(2.0).epsilon(0.05));
  CHECK(stats.std_y == doctest::Approx(2.0).epsilon(0.05));
  const double se = 3.0 * 2.0 / std::sqrt(static_cast<double>(stats.paired_count));
  CHECK(std::abs(stats.mean_x) < se);
  CHECK(std::abs(stats.mean_y) < se);
}

TEST_CASE("same seed twice gives bit-identical frames") {
  SceneConfig config;
  config.width = 64;
  config.height = 48;
  config.unpaired_rate = 0.2;
  config.day_night_mix = 0.4;
  config.seed = 21;
  const synth::Dataset a = synth::generate_dataset(config, 6);
  const synth::Dataset b = synth::generate_dataset(config, 6);
  REQUIRE(a.frames.size() == b.frames.size());
  for (size_t i = 0; i < a.frames.size(); ++i) {
    CHECK(a.frames[i].annotation == b.frames[i].annotation);
    CHECK(a.frames[i].reference_image == b.frames[i].reference_image);
    CHECK(a.frames[i].sensed_image == b.frames[i].sensed_image);
  }
}

TEST_CASE("annotation boxes describe both modalities with the drawn shift") {
  SceneConfig config;
  config.width = 96;
  config.height = 64;
  config.shift_std_x = 3.0;
  config.shift_std_y = 1.0;
  config.unpaired_rate = 0.3;
  config.seed = 2;
  const synth::Dataset dataset = synth::generate_dataset(config, 30);
  size_t unpaired = 0;
  for (const synth::Frame& frame : dataset.frames) {
    for (const annot::PairedObject& obj : frame.annotation.objects) {
      CHECK((obj.reference_box.has_value() || obj.sensed_box.has_value()));
      CHECK(obj.paired == (obj.reference_box && obj.sensed_box));
      if (!obj.paired) {
        ++unpaired;
      } else {
        CHECK(obj.sensed_box->width == obj.reference_box->width);
        CHECK(obj.sensed_box->height == obj.reference_box->height);
      }
    }
  }
  CHECK(unpaired > 0);
}

TEST_CASE("dataset persistence round trip") {
  SceneConfig config;
  config.width = 64;
  config.height = 48;
  config.seed = 33;
  const synth::Dataset dataset = synth::generate_dataset(config, 3);
  const auto dir = std::filesystem::temp_directory_path() / "arcnn_dataset_test";
  std::filesystem::remove_all(dir);
  synth::save_dataset(dir, dataset);
  const synth::Dataset back = synth::load_dataset(dir);
  REQUIRE(back.frames.size() == dataset.frames.size());
  for (size_t i = 0; i < back.frames.size(); ++i) {
    CHECK(back.frames[i].annotation == dataset.frames[i].annotation);
    CHECK(back.frames[i].reference_image == dataset.frames[i].reference_image);
    CHECK(back.frames[i].sensed_image == dataset.frames[i].sensed_image);
  }
  std::filesystem::remove_all(dir);
}
