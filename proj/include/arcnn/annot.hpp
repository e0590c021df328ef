// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "arcnn/geom.hpp"

namespace arcnn::annot {

enum class Modality { reference, sensed };

std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

/// One pedestrian with its per-modality boxes and pairing metadata.
/// paired is true exactly when both boxes are present; at least one box
/// is always present. Extreme-case frames may carry sensed_box identical
/// to reference_box.
struct PairedObject {
  int64_t uid = 0;
  std::optional<geom::Box> reference_box;
  std::optional<geom::Box> sensed_box;
  bool occluded = false;
  bool paired = false;
  bool ignore = false;  // evaluation mark, never serialized

  const std::optional<geom::Box>& box(Modality m) const {
    return m == Modality::reference ? reference_box : sensed_box;
  }

  bool operator==(const PairedObject&) const = default;
};

struct FrameAnnotation {
  std::string frame_id;
  int image_width = 0;
  int image_height = 0;
  std::vector<PairedObject> objects;

  bool operator==(const FrameAnnotation&) const = default;
};

struct Detection {
  std::string frame_id;
  geom::Box box;
  double score = 0.0;
  Modality modality = Modality::reference;
};

/// Loads/saves the annotation document. load validates the schema and the
/// type invariants (paired flag consistency, box positivity, document-wide
/// uid uniqueness) and throws std::runtime_error naming the offending
/// field/uid; save(load(x)) is the identity on valid documents.
std::vector<FrameAnnotation> load_annotations(const std::filesystem::path& path);
void save_annotations(const std::filesystem::path& path,
                      std::span<const FrameAnnotation> frames);

std::vector<Detection> load_detections(const std::filesystem::path& path);
void save_detections(const std::filesystem::path& path,
                     std::span<const Detection> detections);

/// Schema/invariant diagnostics for a raw annotation file, all violations
/// collected (used by the validate command).
struct Diagnostic {
  std::string frame_id;
  int64_t uid = -1;  // -1 when not object-specific
  std::string message;
};
std::vector<Diagnostic> validate_annotation_file(const std::filesystem::path& path);

/// Per-object center-shift statistics over paired objects only.
struct ShiftStats {
  std::vector<size_t> histogram;  // unit pixel bins of Euclidean distance
  double mean_x = 0.0;
  double mean_y = 0.0;
  double std_x = 0.0;  // population standard deviation
  double std_y = 0.0;
  size_t paired_count = 0;
  size_t unpaired_count = 0;
};
ShiftStats shift_statistics(std::span<const FrameAnnotation> frames);

/// Marks ignore on objects failing the reasonable setup: modal height below
/// min_height, or occluded when occlusion is not allowed. Height is taken
/// from the reference box when present, otherwise the sensed box. Idempotent.
std::vector<FrameAnnotation> reasonable_filter(std::vector<FrameAnnotation> frames,
                                               double min_height = 55.0,
                                               bool allow_occluded = false);

/// Translates every sensed box by (dx, dy); reference boxes untouched.
std::vector<FrameAnnotation> shift_all_sensed(std::vector<FrameAnnotation> frames,
                                              double dx, double dy);

}  // namespace arcnn::annot
