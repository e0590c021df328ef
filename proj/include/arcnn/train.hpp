// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "arcnn/model.hpp"
#include "arcnn/synth.hpp"

namespace arcnn::train {

struct TrainConfig {
  double learning_rate = 0.005;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  int epochs = 3;
  int lr_decay_epoch = 2;  // epochs >= this run at learning_rate * lr_decay_factor
  double lr_decay_factor = 0.1;
  int batch_rois = 64;
  double positive_fraction = 0.25;
  double jitter_sigma0 = 0.05;
  double jitter_sigma1 = 0.05;
  double lambda = 1.0;
  bool enable_rfa = true;
  bool enable_jitter = true;
  model::FusionMode fusion = model::FusionMode::confidence_aware;
  uint64_t seed = 1;
  model::ProposalConfig proposals;

  bool operator==(const TrainConfig&) const = default;
};

/// One sampled RoI. The reference-side RoI is the shared proposal and anchors
/// the label and regression target. For paired positives the sensed-side RoI
/// starts at the matched reference GT box (the shift-target anchor); RoI
/// jitter perturbs it and recomputes the target so that
/// apply_shift(sensed_roi, shift_target) keeps landing on the sensed GT.
struct RoiSample {
  geom::Box reference_roi{0, 0, 1, 1};
  geom::Box sensed_roi{0, 0, 1, 1};
  int label = 0;  // 1 pedestrian, 0 background
  std::optional<geom::ShiftTarget> shift_target;
  std::optional<std::array<double, 4>> reg_target;
  std::optional<geom::Box> sensed_gt;
};

struct MiniBatch {
  std::vector<RoiSample> samples;
  bool positives_only = false;  // warning marker: no eligible negatives existed
};

/// Labels proposals against reference-modality ground truth: positive above
/// IoU 0.5 (strict), negative in [0.1, 0.5], excluded below 0.1. The batch
/// holds batch_rois samples with at most positive_fraction positives, padded
/// with negatives (with replacement when too few are eligible).
MiniBatch sample_minibatch(std::span<const geom::ScoredBox> proposals,
                           const annot::FrameAnnotation& frame,
                           const TrainConfig& config, Rng& rng);

/// Replaces every sensed-side RoI by jitter_box of itself and recomputes the
/// shift targets of paired positives against the sensed GT. Reference RoIs
/// and labels are untouched.
void apply_roi_jitter(MiniBatch& batch, double sigma0, double sigma1, Rng& rng);

struct StepStats {
  double loss = 0.0;
  double cls = 0.0;
  double shift = 0.0;
  double reg = 0.0;
  size_t positives = 0;
};

/// Forward (and, when `grads` is non-null, backward) pass of the multi-task
/// objective over one mini-batch. Parameter gradients accumulate into `grads`
/// (same layout as Params, zeroed by the caller). The re-pool regions derived
/// from the predicted shifts are treated as constants; passing
/// `fixed_aligned_regions` pins them explicitly (gradient checking), while
/// `out_aligned_regions` reports the regions the pass used.
StepStats batch_forward_backward(
    const model::Params& params, const model::TwoStreamFeatures& features,
    const MiniBatch& batch, const TrainConfig& config, model::Params* grads,
    const std::vector<geom::Box>* fixed_aligned_regions = nullptr,
    std::vector<geom::Box>* out_aligned_regions = nullptr);

struct TrainResult {
  model::Params params;
  std::vector<double> loss_trace;  // one entry per iteration
  std::vector<StepStats> stats_trace;
};

/// SGD with momentum and weight decay over the multi-task objective, with a
/// step learning-rate decay at the configured epoch boundary. Deterministic
/// for a fixed config seed. Throws on a non-finite loss, naming the iteration.
TrainResult train(model::Params params, const synth::Dataset& dataset,
                  const TrainConfig& config);

}  // namespace arcnn::train
