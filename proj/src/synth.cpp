// SPDX-License-Identifier: Apache-2.0
#include "arcnn/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "arcnn/geom.hpp"

namespace arcnn::synth {

using geom::Box;
using nn::Tensor;

namespace {

constexpr double kPi = 3.14159265358979323846;

struct Wave {
  double fx, fy, phase, gain;
};

// Low-frequency texture field: a small sum of sinusoids.
std::vector<Wave> draw_waves(Rng& rng, int count, double gain) {
  std::vector<Wave> waves;
  for (int i = 0; i < count; ++i) {
    waves.push_back({rng.uniform(0.01, 0.08), rng.uniform(0.01, 0.08),
                     rng.uniform(0.0, 2.0 * kPi), gain * rng.uniform(0.5, 1.0)});
  }
  return waves;
}

double eval_waves(const std::vector<Wave>& waves, double x, double y) {
  double v = 0.0;
  for (const Wave& w : waves) {
    v += w.gain * std::sin(2.0 * kPi * (w.fx * x + w.fy * y) + w.phase);
  }
  return v;
}

struct ObjectShape {
  Box box;          // nominal bounding box
  double color[3];  // per-channel intensity
};

// Pedestrian surrogate: head disc on top of a body ellipse, both inside the
// nominal box.
bool inside_shape(const Box& b, double px, double py) {
  const double cx = b.center_x();
  const double head_cy = b.y_min + 0.16 * b.height;
  const double head_r = 0.14 * b.height;
  const double dxh = px - cx;
  const double dyh = py - head_cy;
  if (dxh * dxh + dyh * dyh <= head_r * head_r) return true;
  const double body_cy = b.y_min + 0.62 * b.height;
  const double ax = 0.5 * b.width * 0.92;
  const double ay = 0.38 * b.height;
  const double dxb = (px - cx) / ax;
  const double dyb = (py - body_cy) / ay;
  return dxb * dxb + dyb * dyb <= 1.0;
}

void render_object(Tensor& image, const Box& box, const double color[3]) {
  const long h = static_cast<long>(image.dim(1));
  const long w = static_cast<long>(image.dim(2));
  const long x0 = std::max<long>(0, static_cast<long>(std::floor(box.x_min)));
  const long y0 = std::max<long>(0, static_cast<long>(std::floor(box.y_min)));
  const long x1 = std::min<long>(w - 1, static_cast<long>(std::ceil(box.x_max())));
  const long y1 = std::min<long>(h - 1, static_cast<long>(std::ceil(box.y_max())));
  for (long y = y0; y <= y1; ++y) {
    for (long x = x0; x <= x1; ++x) {
      if (!inside_shape(box, static_cast<double>(x), static_cast<double>(y))) continue;
      for (size_t c = 0; c < 3; ++c) {
        image.at3(c, static_cast<size_t>(y), static_cast<size_t>(x)) = color[c];
      }
    }
  }
}

void reduce_contrast(Tensor& image, double factor, double noise_sigma, Rng& rng) {
  double mean = 0.0;
  for (double v : image.data) mean += v;
  mean /= static_cast<double>(image.numel());
  for (double& v : image.data) {
    v = mean + (v - mean) * factor + rng.normal(0.0, noise_sigma);
  }
}

}  // namespace

std::vector<annot::FrameAnnotation> Dataset::annotations() const {
  std::vector<annot::FrameAnnotation> out;
  out.reserve(frames.size());
  for (const Frame& f : frames) out.push_back(f.annotation);
  return out;
}

Frame generate_scene(const SceneConfig& config, Rng& rng, const std::string& frame_id,
                     int64_t uid_base) {
  if (config.width % 4 != 0 || config.height % 4 != 0) {
    throw std::invalid_argument("generate_scene: image dims must be multiples of 4");
  }
  if (config.unpaired_rate < 0.0 || config.unpaired_rate > 1.0 ||
      config.day_night_mix < 0.0 || config.day_night_mix > 1.0) {
    throw std::invalid_argument("generate_scene: probabilities must lie in [0,1]");
  }
  const size_t w = static_cast<size_t>(config.width);
  const size_t h = static_cast<size_t>(config.height);

  Frame frame;
  frame.annotation.frame_id = frame_id;
  frame.annotation.image_width = config.width;
  frame.annotation.image_height = config.height;
  frame.reference_image = Tensor({3, h, w});
  frame.sensed_image = Tensor({3, h, w});

  // Backgrounds: thermal-like gray for the reference, colored for the sensed.
  const auto ref_waves = draw_waves(rng, 3, 0.07);
  const double ref_base = rng.uniform(0.10, 0.18);
  std::vector<std::vector<Wave>> sen_waves;
  double sen_base[3];
  for (int c = 0; c < 3; ++c) {
    sen_waves.push_back(draw_waves(rng, 2, 0.06));
    sen_base[c] = rng.uniform(0.25, 0.42);
  }
  for (size_t y = 0; y < h; ++y) {
    for (size_t x = 0; x < w; ++x) {
      const double fx = static_cast<double>(x);
      const double fy = static_cast<double>(y);
      const double ref_v = ref_base + eval_waves(ref_waves, fx, fy) +
                           rng.normal(0.0, 0.03);
      for (size_t c = 0; c < 3; ++c) frame.reference_image.at3(c, y, x) = ref_v;
      for (size_t c = 0; c < 3; ++c) {
        frame.sensed_image.at3(c, y, x) =
            sen_base[c] + eval_waves(sen_waves[c], fx, fy) + rng.normal(0.0, 0.02);
      }
    }
  }

  const int object_count =
      static_cast<int>(rng.uniform_int(config.min_objects, config.max_objects));
  std::vector<Box> placed;
  const double margin = 12.0;
  for (int i = 0; i < object_count; ++i) {
    const double oh = rng.uniform(config.min_object_height, config.max_object_height);
    const double ow = oh * 0.45 * rng.uniform(0.9, 1.1);
    Box ref_box(0, 0, ow, oh);
    bool ok = false;
    for (int attempt = 0; attempt < 20 && !ok; ++attempt) {
      const double cx = rng.uniform(margin + ow / 2.0, config.width - margin - ow / 2.0);
      const double cy = rng.uniform(margin + oh / 2.0, config.height - margin - oh / 2.0);
      ref_box = Box::from_center(cx, cy, ow, oh);
      ok = true;
      for (const Box& other : placed) {
        if (geom::iou(ref_box, other) > 0.25) {
          ok = false;
          break;
        }
      }
    }
    placed.push_back(ref_box);

    const double dx = rng.normal(config.shift_mean_x, config.shift_std_x);
    const double dy = rng.normal(config.shift_mean_y, config.shift_std_y);
    const Box sen_box(ref_box.x_min + dx, ref_box.y_min + dy, ref_box.width,
                      ref_box.height);

    annot::PairedObject obj;
    obj.uid = uid_base + i;
    obj.occluded = false;
    const bool unpaired = rng.uniform() < config.unpaired_rate;
    const bool drop_sensed = unpaired && rng.uniform() < 0.5;

    const double ref_color_v = rng.uniform(0.44, 0.56);
    const double ref_color[3] = {ref_color_v, ref_color_v, ref_color_v};
    double sen_color[3];
    for (int c = 0; c < 3; ++c) sen_color[c] = rng.uniform(0.62, 0.95);

    if (unpaired) {
      obj.paired = false;
      if (drop_sensed) {
        obj.reference_box = ref_box;
        render_object(frame.reference_image, ref_box, ref_color);
      } else {
        obj.sensed_box = sen_box;
        render_object(frame.sensed_image, sen_box, sen_color);
      }
    } else {
      obj.paired = true;
      obj.reference_box = ref_box;
      obj.sensed_box = sen_box;
      render_object(frame.reference_image, ref_box, ref_color);
      render_object(frame.sensed_image, sen_box, sen_color);
    }
    frame.annotation.objects.push_back(obj);
  }

  if (rng.uniform() < config.day_night_mix) {
    reduce_contrast(frame.sensed_image, 0.12, 0.02, rng);
  }
  return frame;
}

Dataset generate_dataset(const SceneConfig& config, int frame_count,
                         uint64_t stream_offset) {
  Dataset dataset;
  const Rng root(config.seed);
  for (int i = 0; i < frame_count; ++i) {
    Rng frame_rng = root.derive(stream_offset + static_cast<uint64_t>(i));
    char buf[32];
    std::snprintf(buf, sizeof(buf), "f%05llu",
                  static_cast<unsigned long long>(stream_offset + i));
    dataset.frames.push_back(generate_scene(
        config, frame_rng, buf,
        static_cast<int64_t>((stream_offset + static_cast<uint64_t>(i)) * 1000)));
  }
  return dataset;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
  std::filesystem::create_directories(dir);
  const auto annotations = dataset.annotations();
  annot::save_annotations(dir / "annotations.json", annotations);
  nlohmann::json manifest;
  manifest["schema"] = kDatasetFormat;
  manifest["frames"] = nlohmann::json::array();
  for (const Frame& frame : dataset.frames) {
    const std::string ref_name = frame.annotation.frame_id + "_ref.ten";
    const std::string sen_name = frame.annotation.frame_id + "_sen.ten";
    nn::write_tensor(dir / ref_name, frame.reference_image);
    nn::write_tensor(dir / sen_name, frame.sensed_image);
    manifest["frames"].push_back({{"frame_id", frame.annotation.frame_id},
                                  {"reference", ref_name},
                                  {"sensed", sen_name}});
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write dataset manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("cannot open dataset manifest in " + dir.string());
  nlohmann::json manifest = nlohmann::json::parse(in);
  if (!manifest.contains("schema") || manifest["schema"] != kDatasetFormat) {
    throw std::runtime_error(dir.string() + ": dataset format mismatch");
  }
  auto annotations = annot::load_annotations(dir / "annotations.json");
  Dataset dataset;
  for (const nlohmann::json& jf : manifest.at("frames")) {
    Frame frame;
    const std::string frame_id = jf.at("frame_id").get<std::string>();
    auto it = std::find_if(annotations.begin(), annotations.end(),
                           [&](const annot::FrameAnnotation& a) {
                             return a.frame_id == frame_id;
                           });
    if (it == annotations.end()) {
      throw std::runtime_error(dir.string() + ": frame '" + frame_id +
                               "' missing from annotations");
    }
    frame.annotation = *it;
    frame.reference_image = nn::read_tensor(dir / jf.at("reference").get<std::string>());
    frame.sensed_image = nn::read_tensor(dir / jf.at("sensed").get<std::string>());
    dataset.frames.push_back(std::move(frame));
  }
  return dataset;
}

}  // namespace arcnn::synth
