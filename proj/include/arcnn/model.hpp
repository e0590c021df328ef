// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "arcnn/annot.hpp"
#include "arcnn/geom.hpp"
#include "arcnn/nn.hpp"
#include "arcnn/rng.hpp"

namespace arcnn::model {

struct ModelConfig {
  size_t in_channels = 3;
  size_t base_channels = 8;
  size_t feature_channels = 16;
  size_t stride = 4;  // two stride-2 pools in the extractor
  size_t pooled_size = 7;
  size_t samples_per_bin = 2;
  size_t rfa_hidden = 256;
  size_t conf_hidden = 64;
  size_t det_hidden = 256;
  double context_factor = 1.5;

  size_t region_feature_size() const {
    return feature_channels * pooled_size * pooled_size;
  }
  bool operator==(const ModelConfig&) const = default;
};

/// 3x3 convolution, zero padding, stride 1, no bias.
struct ConvLayer {
  nn::Tensor weights;  // [out, in, 3, 3]
};

struct TwoStreamFeatures {
  nn::Tensor reference;  // [C x H x W]
  nn::Tensor sensed;     // same shape
  double stride = 4.0;   // image pixels per feature cell
};

/// Two consecutive FC layers predicting (t_x, t_y) from the concatenated
/// contextual region features of both modalities.
struct RfaHead {
  nn::FcLayer fc1;
  nn::FcLayer fc2;  // output dimension exactly 2
};

/// Per-modality confidence predictor: two FC layers ending in 2 logits.
struct ConfidenceBranch {
  nn::FcLayer fc1;
  nn::FcLayer fc2;
};

/// Classification + box regression head on the fused region feature:
/// two FC layers ending in 2 class logits and 4 regression deltas.
struct DetectHead {
  nn::FcLayer fc1;
  nn::FcLayer fc2;  // output dimension 6
};

/// All named parameters of the detector. The convolutional stand-in stays
/// frozen at its seeded initialization; the heads and branches train.
struct Params {
  ModelConfig config;
  ConvLayer conv1, conv2, conv3;
  RfaHead rfa;
  ConfidenceBranch conf_ref, conf_sen;
  DetectHead det;

  static Params init(const ModelConfig& config, uint64_t seed);

  std::vector<std::pair<std::string, nn::Tensor*>> named_tensors();
  std::vector<std::pair<std::string, const nn::Tensor*>> named_tensors() const;
  /// Tensors updated by SGD under the given feature flags.
  std::vector<std::pair<std::string, nn::Tensor*>> trainable_tensors(
      bool enable_rfa, bool confidence_fusion);
};

nn::Tensor conv3x3(const nn::Tensor& input, const nn::Tensor& weights);
nn::Tensor max_pool2(const nn::Tensor& input);

/// Applies the fixed conv stack to one image stream.
nn::Tensor extract_stream_features(const nn::Tensor& image, const Params& params);

/// Both streams through the shared extractor; images must share shape.
TwoStreamFeatures extract_features(const nn::Tensor& reference_image,
                                   const nn::Tensor& sensed_image,
                                   const Params& params);

/// Union of both per-modality proposal lists followed by NMS; the survivors
/// are shared by both streams.
std::vector<geom::ScoredBox> aggregate_proposals(
    std::span<const geom::ScoredBox> reference_proposals,
    std::span<const geom::ScoredBox> sensed_proposals, double iou_threshold);

/// Scripted stand-in for the region proposal network: ground-truth boxes of
/// the requested modality perturbed with center noise (+-20% of size) and
/// scale noise (x[0.8,1.25]), looser mid-quality perturbations, and random
/// background boxes.
struct ProposalConfig {
  int near_per_object = 3;
  int mid_per_object = 4;
  int random_count = 6;
  double center_noise = 0.2;
  double scale_lo = 0.8;
  double scale_hi = 1.25;
  double mid_center_noise = 0.55;
  double mid_scale_lo = 0.6;
  double mid_scale_hi = 1.6;
  double aggregate_iou = 0.7;
};
std::vector<geom::ScoredBox> scripted_proposals(const annot::FrameAnnotation& frame,
                                                annot::Modality side,
                                                const ProposalConfig& config,
                                                Rng& rng);

// -- two-FC helper with caches for the hand-written backward passes --------

struct TwoFcCache {
  nn::Tensor input;
  nn::Tensor hidden_pre;
  nn::Tensor hidden;
  nn::Tensor out;
};

/// fc1 -> relu -> fc2.
nn::Tensor two_fc_forward(const nn::FcLayer& fc1, const nn::FcLayer& fc2,
                          const nn::Tensor& input, TwoFcCache* cache = nullptr);

/// Accumulates parameter gradients into grad1/grad2; optionally produces the
/// gradient w.r.t. the input.
void two_fc_backward(const nn::FcLayer& fc1, const nn::FcLayer& fc2,
                     const TwoFcCache& cache, const nn::Tensor& d_out,
                     nn::FcLayer& grad1, nn::FcLayer& grad2,
                     nn::Tensor* d_input = nullptr);

// -- region feature alignment ----------------------------------------------

/// RoIAlign on one stream for a pixel-coordinate region (converted to
/// feature coordinates by the stream stride).
nn::Tensor pool_region(const TwoStreamFeatures& features, const nn::Tensor& map,
                       const geom::Box& pixel_roi, const ModelConfig& config);

struct RfaResult {
  geom::ShiftTarget shift;
  geom::Box aligned_region;   // sensed RoI after apply_shift, pixel coords
  nn::Tensor ref_feature;     // pooled at the un-enlarged reference RoI
  nn::Tensor aligned_sensed;  // re-pooled at the aligned region
};

/// Forward path of the RFA module for shared proposals (inference form):
/// contextual pooling of both streams, concatenation, shift prediction, and
/// re-pooling of the sensed map at the shifted (un-enlarged) region.
/// `injected_shifts`, when given, replaces the head's predictions (oracle
/// mode used by tests).
std::vector<RfaResult> rfa_forward(
    const TwoStreamFeatures& features, std::span<const geom::Box> proposals,
    const RfaHead& head, const ModelConfig& config,
    const std::vector<geom::ShiftTarget>* injected_shifts = nullptr);

/// Pair-aware form used during training, where the sensed-side RoIs may have
/// been jittered away from the shared proposals.
std::vector<RfaResult> rfa_forward_pairs(
    const TwoStreamFeatures& features, std::span<const geom::Box> reference_rois,
    std::span<const geom::Box> sensed_rois, const RfaHead& head,
    const ModelConfig& config,
    const std::vector<geom::ShiftTarget>* injected_shifts = nullptr);

// -- confidence-aware fusion -------------------------------------------------

struct FusionWeights {
  double w_r = 1.0;
  double w_s = 1.0;
  double w_d = 1.0;
  double p1_r = 0.5;
  double p1_s = 0.5;
};

/// W_r = |p1_r - p0_r|, W_s = |p1_s - p0_s|, W_d = 1 - |p1_r - p1_s|.
FusionWeights weights_from_probs(double p1_r, double p1_s);

struct ConfidenceCache {
  TwoFcCache ref_fc;
  TwoFcCache sen_fc;
};

FusionWeights confidence_weights(const nn::Tensor& ref_feature,
                                 const nn::Tensor& sensed_feature,
                                 const ConfidenceBranch& ref_branch,
                                 const ConfidenceBranch& sen_branch,
                                 ConfidenceCache* cache = nullptr);

enum class FusionMode { confidence_aware, naive_concat };
std::string to_string(FusionMode mode);
FusionMode fusion_mode_from_string(const std::string& s);

/// confidence_aware: reference scaled by W_r, sensed by W_s * W_d, then
/// channel-concatenated. naive_concat: plain concatenation.
nn::Tensor fuse(const nn::Tensor& ref_feature, const nn::Tensor& sensed_feature,
                const FusionWeights& weights, FusionMode mode);

// -- detection head -----------------------------------------------------------

struct DetOutput {
  double logit0 = 0.0;
  double logit1 = 0.0;
  std::array<double, 4> deltas{};
};

DetOutput detect_head(const nn::Tensor& fused_feature, const DetectHead& head,
                      TwoFcCache* cache = nullptr);

/// Fast R-CNN 4-target box parameterization against the reference modality.
std::array<double, 4> encode_deltas(const geom::Box& proposal, const geom::Box& gt);
geom::Box decode_deltas(const geom::Box& proposal, const std::array<double, 4>& deltas);

// -- losses -------------------------------------------------------------------

/// Shift regression loss: (1/N_shift) * sum_i p*_i [sl1(dtx_i) + sl1(dty_i)]
/// with p*_i = labels[i] in {0,1} and N_shift the number of positive RoIs.
/// Defined as 0 when no positives exist.
double shift_loss(std::span<const geom::ShiftTarget> predicted,
                  std::span<const geom::ShiftTarget> targets,
                  std::span<const int> labels);

/// Multi-task objective: L_cls + lambda * L_shift + L_reg.
double total_loss(double cls_term, double shift_term, double reg_term, double lambda);

/// Stable -log softmax2(logits)[label].
double cross_entropy2(double logit0, double logit1, int label);

// -- checkpoints ---------------------------------------------------------------

inline constexpr const char* kCheckpointFormat = "arcnn-checkpoint/1";

void save_checkpoint(const std::filesystem::path& path, const Params& params);
Params load_checkpoint(const std::filesystem::path& path);

}  // namespace arcnn::model
