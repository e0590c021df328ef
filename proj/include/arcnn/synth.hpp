// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "arcnn/annot.hpp"
#include "arcnn/nn.hpp"
#include "arcnn/rng.hpp"

namespace arcnn::synth {

/// Procedural two-modality scene parameters. The sensed rendering places each
/// object at its reference position plus a per-axis normal draw; a fraction of
/// objects appear in only one modality; a fraction of frames get a heavily
/// contrast-reduced sensed image (the poor-illumination regime).
struct SceneConfig {
  int width = 128;
  int height = 96;
  int min_objects = 2;
  int max_objects = 4;
  double min_object_height = 22.0;
  double max_object_height = 42.0;
  double shift_mean_x = 0.0;
  double shift_mean_y = 0.0;
  double shift_std_x = 2.5;
  double shift_std_y = 2.5;
  double unpaired_rate = 0.0;
  double day_night_mix = 0.0;
  uint64_t seed = 1;

  bool operator==(const SceneConfig&) const = default;
};

struct Frame {
  annot::FrameAnnotation annotation;
  nn::Tensor reference_image;  // [3 x H x W]
  nn::Tensor sensed_image;
};

struct Dataset {
  std::vector<Frame> frames;

  std::vector<annot::FrameAnnotation> annotations() const;
};

/// Renders one frame. Deterministic for a given rng state; object uids start
/// at uid_base.
Frame generate_scene(const SceneConfig& config, Rng& rng, const std::string& frame_id,
                     int64_t uid_base = 0);

/// frame_count frames from rng streams derived of config.seed (stream_offset
/// shifts the streams so that disjoint splits can be drawn from one seed).
Dataset generate_dataset(const SceneConfig& config, int frame_count,
                         uint64_t stream_offset = 0);

inline constexpr const char* kDatasetFormat = "arcnn-dataset/1";

/// Dataset persistence: annotations.json + one binary tensor file per image
/// + a manifest naming them.
void save_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace arcnn::synth
