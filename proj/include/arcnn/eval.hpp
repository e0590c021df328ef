// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "arcnn/annot.hpp"
#include "arcnn/model.hpp"
#include "arcnn/synth.hpp"

namespace arcnn::eval {

inline constexpr double kMatchIouThreshold = 0.5;
inline constexpr double kMissRateFloor = 1e-4;
inline constexpr int kFppiSamplePoints = 9;  // log-spaced over [1e-2, 1e0]

struct GtEntry {
  geom::Box box{0, 0, 1, 1};
  bool ignore = false;
};

enum class DetOutcome { true_positive, false_positive, ignored };

struct FrameMatch {
  std::vector<DetOutcome> outcomes;  // per detection, input order
  std::vector<int> matched_gt;       // per detection, -1 when unmatched
  std::vector<bool> gt_matched;      // per ground-truth entry
};

/// Greedy one-to-one assignment. Detections must be sorted by descending
/// score; each takes the highest-IoU unmatched GT with IoU strictly above the
/// threshold. A match to an ignore-marked GT is neither TP nor FP; unmatched
/// detections are FP; unmatched non-ignored GTs are misses.
FrameMatch match_frame(std::span<const annot::Detection> detections,
                       std::span<const GtEntry> ground_truth, double iou_threshold);

struct EvalCurve {
  struct Point {
    double fppi;
    double miss_rate;
  };
  std::vector<Point> points;       // in ascending-threshold order
  std::vector<double> thresholds;  // matching score cutoffs, ascending
};

struct MrResult {
  bool has_gt = false;  // false is the explicit no-GT marker
  double mr = 1.0;
  EvalCurve curve;
};

/// Log-average miss rate over FPPI in [1e-2, 1e0]: sweeps thresholds over all
/// detection scores, samples the miss rate at 9 log-spaced FPPI points (value
/// taken from the best achievable operating point at or below each sample),
/// clamps at kMissRateFloor and returns exp(mean of logs). The modality
/// selects which per-modality GT box is matched; objects lacking that box are
/// treated as ignore regions via their other box. Frames should already carry
/// reasonable_filter ignore marks.
MrResult mr_score(std::span<const annot::FrameAnnotation> frames,
                  std::span<const annot::Detection> detections,
                  annot::Modality modality);

// -- the shift-grid robustness protocol --------------------------------------

using FrameDetector =
    std::function<std::vector<annot::Detection>(const annot::FrameAnnotation&,
                                                const nn::Tensor& reference_image,
                                                const nn::Tensor& sensed_image)>;

struct GridEntry {
  int dx = 0;
  int dy = 0;
  double mr = 0.0;
};

struct DirectionStat {
  double mu = 0.0;
  double sigma = 0.0;
};

/// Mean / population std of the 21 MR values along each shift direction.
struct DirectionStats {
  DirectionStat s0, s45, s90, s135;
};

struct SweepResult {
  std::vector<GridEntry> grid;  // sorted by (dx, dy)
  std::optional<DirectionStats> directions;
};

std::vector<std::pair<int, int>> full_grid();       // [-6,6]^2, 169 modes
std::vector<std::pair<int, int>> direction_grid();  // four 21-mode sets, 81 unique

/// For each (dx, dy): translates every sensed image by whole pixels with zero
/// fill, shifts the sensed annotations, runs the detector, and scores MR
/// against reference-modality GT. Modes run concurrently up to `threads`.
/// Direction stats are attached when the grid covers all four direction sets.
SweepResult shift_grid_sweep(const FrameDetector& detector,
                             const synth::Dataset& dataset,
                             std::span<const std::pair<int, int>> shifts, int threads,
                             double reasonable_min_height = 55.0,
                             bool allow_occluded = false);

/// Direction stats from an explicit grid; throws naming any missing mode.
DirectionStats direction_metrics(std::span<const GridEntry> grid);

// -- reports -------------------------------------------------------------------

inline constexpr const char* kReportSchema = "arcnn-eval/1";

struct Report {
  std::optional<MrResult> mr;
  std::vector<GridEntry> grid;
  std::optional<DirectionStats> directions;
};

enum class ReportFormat { json, csv };

void emit_report(const Report& report, const std::filesystem::path& path,
                 ReportFormat format);
Report parse_report_json(const std::filesystem::path& path);

// -- the end-to-end detector ----------------------------------------------------

struct DetectorConfig {
  bool enable_rfa = true;
  model::FusionMode fusion = model::FusionMode::confidence_aware;
  double nms_threshold = 0.5;
  model::ProposalConfig proposals;
  uint64_t seed = 0;  // proposal noise stream, derived per frame_id
};

/// Two-stream detection pipeline: feature extraction, scripted proposal
/// aggregation, region feature alignment (optional), confidence-aware or
/// naive fusion, detection head, and NMS. Read-only and safe to call
/// concurrently.
class Detector {
 public:
  Detector(model::Params params, DetectorConfig config);

  std::vector<annot::Detection> detect(const annot::FrameAnnotation& annotation,
                                       const nn::Tensor& reference_image,
                                       const nn::Tensor& sensed_image) const;
  std::vector<annot::Detection> detect(const synth::Frame& frame) const;

  FrameDetector as_frame_detector() const;

  const model::Params& params() const { return params_; }
  const DetectorConfig& config() const { return config_; }

 private:
  model::Params params_;
  DetectorConfig config_;
};

}  // namespace arcnn::eval
