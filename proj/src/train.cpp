// SPDX-License-Identifier: Apache-2.0
#include "arcnn/train.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace arcnn::train {

using geom::Box;
using geom::ShiftTarget;
using model::FusionMode;
using model::Params;
using nn::Tensor;

namespace {

// Partial Fisher-Yates: first k elements of a shuffled index range.
std::vector<size_t> sample_indices(size_t n, size_t k, Rng& rng) {
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  const size_t take = std::min(n, k);
  for (size_t i = 0; i < take; ++i) {
    const size_t j = i + static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(n - i - 1)));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(take);
  return idx;
}

Params zero_like(const Params& params) {
  Params z = params;
  for (auto& [name, tensor] : z.named_tensors()) {
    (void)name;
    std::fill(tensor->data.begin(), tensor->data.end(), 0.0);
  }
  return z;
}

}  // namespace

MiniBatch sample_minibatch(std::span<const geom::ScoredBox> proposals,
                           const annot::FrameAnnotation& frame,
                           const TrainConfig& config, Rng& rng) {
  if (proposals.empty()) {
    throw std::invalid_argument("sample_minibatch: no proposals");
  }
  std::vector<const annot::PairedObject*> gt;
  for (const annot::PairedObject& obj : frame.objects) {
    if (obj.reference_box) gt.push_back(&obj);
  }

  std::vector<RoiSample> positives;
  std::vector<RoiSample> negatives;
  for (const geom::ScoredBox& prop : proposals) {
    double best_iou = 0.0;
    const annot::PairedObject* best = nullptr;
    for (const annot::PairedObject* obj : gt) {
      const double v = geom::iou(prop.box, *obj->reference_box);
      if (v > best_iou) {
        best_iou = v;
        best = obj;
      }
    }
    if (best_iou < 0.1) continue;  // excluded
    RoiSample sample;
    sample.reference_roi = prop.box;
    sample.sensed_roi = prop.box;
    if (best_iou > 0.5) {
      sample.label = 1;
      sample.reg_target = model::encode_deltas(prop.box, *best->reference_box);
      if (best->sensed_box) {
        sample.sensed_gt = *best->sensed_box;
        sample.sensed_roi = *best->reference_box;  // GT-pair anchor for the target
        sample.shift_target = geom::encode_shift(*best->reference_box, *best->sensed_box);
      }
      positives.push_back(std::move(sample));
    } else {
      sample.label = 0;
      negatives.push_back(std::move(sample));
    }
  }

  MiniBatch batch;
  const size_t batch_size = static_cast<size_t>(config.batch_rois);
  const size_t max_pos = static_cast<size_t>(
      std::llround(config.positive_fraction * static_cast<double>(config.batch_rois)));
  for (size_t i : sample_indices(positives.size(), max_pos, rng)) {
    batch.samples.push_back(positives[i]);
  }
  if (negatives.empty()) {
    batch.positives_only = true;
    return batch;
  }
  const size_t need = batch_size - batch.samples.size();
  if (negatives.size() >= need) {
    for (size_t i : sample_indices(negatives.size(), need, rng)) {
      batch.samples.push_back(negatives[i]);
    }
  } else {
    for (const RoiSample& s : negatives) batch.samples.push_back(s);
    for (size_t i = negatives.size(); i < need; ++i) {
      const size_t j = static_cast<size_t>(
          rng.uniform_int(0, static_cast<int64_t>(negatives.size()) - 1));
      batch.samples.push_back(negatives[j]);
    }
  }
  return batch;
}

void apply_roi_jitter(MiniBatch& batch, double sigma0, double sigma1, Rng& rng) {
  for (RoiSample& sample : batch.samples) {
    sample.sensed_roi = geom::jitter_box(sample.sensed_roi, sigma0, sigma1, rng);
    if (sample.sensed_gt) {
      sample.shift_target = geom::encode_shift(sample.sensed_roi, *sample.sensed_gt);
    }
  }
}

StepStats batch_forward_backward(const Params& params,
                                 const model::TwoStreamFeatures& features,
                                 const MiniBatch& batch, const TrainConfig& config,
                                 Params* grads,
                                 const std::vector<Box>* fixed_aligned_regions,
                                 std::vector<Box>* out_aligned_regions) {
  const size_t n = batch.samples.size();
  if (n == 0) return {};
  if (fixed_aligned_regions && fixed_aligned_regions->size() != n) {
    throw std::invalid_argument("batch_forward_backward: fixed region count mismatch");
  }
  const model::ModelConfig& mc = params.config;
  const bool caf = config.fusion == FusionMode::confidence_aware;
  const double bound_w = static_cast<double>(features.reference.dim(2)) * features.stride;
  const double bound_h = static_cast<double>(features.reference.dim(1)) * features.stride;

  size_t n_pos = 0;
  size_t n_shift = 0;
  for (const RoiSample& s : batch.samples) {
    if (s.label == 1) {
      ++n_pos;
      if (config.enable_rfa && s.shift_target) ++n_shift;
    }
  }

  struct SampleCache {
    model::TwoFcCache rfa;
    ShiftTarget pred{};
    Box aligned_region{0, 0, 1, 1};
    Tensor ref_feature;
    Tensor sen_feature;
    model::ConfidenceCache conf;
    model::FusionWeights weights;
    Tensor fused;
    model::TwoFcCache det;
    model::DetOutput out;
  };
  std::vector<SampleCache> caches(n);

  StepStats stats;
  stats.positives = n_pos;

  // Forward.
  for (size_t i = 0; i < n; ++i) {
    const RoiSample& s = batch.samples[i];
    SampleCache& c = caches[i];
    if (config.enable_rfa) {
      const Box ctx_ref = geom::enlarge_context(s.reference_roi, mc.context_factor,
                                                bound_w, bound_h);
      const Box ctx_sen = geom::enlarge_context(s.sensed_roi, mc.context_factor,
                                                bound_w, bound_h);
      const Tensor pooled_ref = model::pool_region(features, features.reference,
                                                   ctx_ref, mc);
      const Tensor pooled_sen = model::pool_region(features, features.sensed,
                                                   ctx_sen, mc);
      Tensor concat({pooled_ref.numel() + pooled_sen.numel()});
      std::copy(pooled_ref.data.begin(), pooled_ref.data.end(), concat.data.begin());
      std::copy(pooled_sen.data.begin(), pooled_sen.data.end(),
                concat.data.begin() + pooled_ref.numel());
      const Tensor pred = model::two_fc_forward(params.rfa.fc1, params.rfa.fc2,
                                                concat, &c.rfa);
      c.pred = {pred[0], pred[1]};
      // Re-pool location: the predicted shift applied to the sensed RoI,
      // treated as a constant for the backward pass.
      c.aligned_region = fixed_aligned_regions
                             ? (*fixed_aligned_regions)[i]
                             : geom::apply_shift(s.sensed_roi, c.pred);
    } else {
      c.aligned_region = fixed_aligned_regions ? (*fixed_aligned_regions)[i]
                                               : s.sensed_roi;
    }
    c.ref_feature = model::pool_region(features, features.reference, s.reference_roi, mc);
    c.sen_feature = model::pool_region(features, features.sensed, c.aligned_region, mc);
    if (caf) {
      c.weights = model::confidence_weights(c.ref_feature, c.sen_feature,
                                            params.conf_ref, params.conf_sen, &c.conf);
    }
    c.fused = model::fuse(c.ref_feature, c.sen_feature, c.weights,
                          caf ? FusionMode::confidence_aware : FusionMode::naive_concat);
    c.out = model::detect_head(c.fused, params.det, &c.det);

    stats.cls += model::cross_entropy2(c.out.logit0, c.out.logit1, s.label);
    if (s.label == 1 && s.reg_target) {
      for (size_t k = 0; k < 4; ++k) {
        stats.reg += nn::smooth_l1(c.out.deltas[k] - (*s.reg_target)[k]);
      }
    }
    if (config.enable_rfa && s.label == 1 && s.shift_target) {
      stats.shift += nn::smooth_l1(c.pred.tx - s.shift_target->tx) +
                     nn::smooth_l1(c.pred.ty - s.shift_target->ty);
    }
  }
  stats.cls /= static_cast<double>(n);
  if (n_pos > 0) stats.reg /= static_cast<double>(n_pos);
  if (n_shift > 0) stats.shift /= static_cast<double>(n_shift);
  stats.loss = model::total_loss(stats.cls, stats.shift, stats.reg, config.lambda);

  if (out_aligned_regions) {
    out_aligned_regions->clear();
    for (const SampleCache& c : caches) out_aligned_regions->push_back(c.aligned_region);
  }
  if (!grads) return stats;

  // Backward.
  for (size_t i = 0; i < n; ++i) {
    const RoiSample& s = batch.samples[i];
    SampleCache& c = caches[i];

    Tensor d_out6({6});
    const auto [p0, p1] = nn::softmax2(c.out.logit0, c.out.logit1);
    const double inv_n = 1.0 / static_cast<double>(n);
    d_out6[0] = (p0 - (s.label == 0 ? 1.0 : 0.0)) * inv_n;
    d_out6[1] = (p1 - (s.label == 1 ? 1.0 : 0.0)) * inv_n;
    if (s.label == 1 && s.reg_target && n_pos > 0) {
      for (size_t k = 0; k < 4; ++k) {
        d_out6[2 + k] = nn::smooth_l1_grad(c.out.deltas[k] - (*s.reg_target)[k]) /
                        static_cast<double>(n_pos);
      }
    }
    Tensor d_fused;
    model::two_fc_backward(params.det.fc1, params.det.fc2, c.det, d_out6,
                           grads->det.fc1, grads->det.fc2, &d_fused);

    if (caf) {
      const size_t half = c.ref_feature.numel();
      double d_wr = 0.0;
      double d_wsd = 0.0;
      for (size_t k = 0; k < half; ++k) {
        d_wr += d_fused[k] * c.ref_feature[k];
        d_wsd += d_fused[half + k] * c.sen_feature[k];
      }
      const double d_ws = d_wsd * c.weights.w_d;
      const double d_wd = d_wsd * c.weights.w_s;
      auto sgn = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };
      const double diff = c.weights.p1_r - c.weights.p1_s;
      // W_r = |2 p1_r - 1|, W_s = |2 p1_s - 1|, W_d = 1 - |p1_r - p1_s|
      const double d_p1r = d_wr * 2.0 * sgn(2.0 * c.weights.p1_r - 1.0) +
                           d_wd * (-sgn(diff));
      const double d_p1s = d_ws * 2.0 * sgn(2.0 * c.weights.p1_s - 1.0) +
                           d_wd * sgn(diff);
      // p1 = softmax2(l0, l1).second; dp1/dl1 = p1 p0, dp1/dl0 = -p1 p0.
      const double pr = c.weights.p1_r;
      const double ps = c.weights.p1_s;
      Tensor d_ref_logits({2});
      d_ref_logits[0] = -d_p1r * pr * (1.0 - pr);
      d_ref_logits[1] = d_p1r * pr * (1.0 - pr);
      Tensor d_sen_logits({2});
      d_sen_logits[0] = -d_p1s * ps * (1.0 - ps);
      d_sen_logits[1] = d_p1s * ps * (1.0 - ps);
      model::two_fc_backward(params.conf_ref.fc1, params.conf_ref.fc2, c.conf.ref_fc,
                             d_ref_logits, grads->conf_ref.fc1, grads->conf_ref.fc2);
      model::two_fc_backward(params.conf_sen.fc1, params.conf_sen.fc2, c.conf.sen_fc,
                             d_sen_logits, grads->conf_sen.fc1, grads->conf_sen.fc2);
    }

    if (config.enable_rfa && s.label == 1 && s.shift_target && n_shift > 0) {
      Tensor d_pred({2});
      const double scale = config.lambda / static_cast<double>(n_shift);
      d_pred[0] = nn::smooth_l1_grad(c.pred.tx - s.shift_target->tx) * scale;
      d_pred[1] = nn::smooth_l1_grad(c.pred.ty - s.shift_target->ty) * scale;
      model::two_fc_backward(params.rfa.fc1, params.rfa.fc2, c.rfa, d_pred,
                             grads->rfa.fc1, grads->rfa.fc2);
    }
  }
  return stats;
}

TrainResult train(Params params, const synth::Dataset& dataset,
                  const TrainConfig& config) {
  if (dataset.frames.empty()) {
    throw std::invalid_argument("train: empty dataset");
  }
  const bool caf = config.fusion == FusionMode::confidence_aware;
  Params grads = zero_like(params);
  Params velocity = zero_like(params);
  auto grad_of = [&](Params& store, const std::string& name) -> Tensor* {
    for (auto& [n, t] : store.named_tensors()) {
      if (n == name) return t;
    }
    throw std::logic_error("train: unknown tensor " + name);
  };

  // The extractor is frozen, so per-frame features are computed once.
  std::vector<model::TwoStreamFeatures> feature_cache(dataset.frames.size());
  std::vector<bool> cached(dataset.frames.size(), false);

  const Rng root(config.seed);
  TrainResult result;
  size_t iteration = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = epoch >= config.lr_decay_epoch
                          ? config.learning_rate * config.lr_decay_factor
                          : config.learning_rate;
    Rng order_rng = root.derive(0x0e70c000ull + static_cast<uint64_t>(epoch));
    std::vector<size_t> order =
        sample_indices(dataset.frames.size(), dataset.frames.size(), order_rng);
    for (size_t frame_idx : order) {
      const synth::Frame& frame = dataset.frames[frame_idx];
      if (!cached[frame_idx]) {
        feature_cache[frame_idx] =
            model::extract_features(frame.reference_image, frame.sensed_image, params);
        cached[frame_idx] = true;
      }
      Rng iter_rng = root.derive((static_cast<uint64_t>(epoch) << 32) ^
                                 (frame_idx * 2654435761ull) ^ 0xba7c4000ull);
      Rng ref_rng = iter_rng.derive(1);
      Rng sen_rng = iter_rng.derive(2);
      Rng batch_rng = iter_rng.derive(3);
      Rng jitter_rng = iter_rng.derive(4);
      const auto ref_props = model::scripted_proposals(
          frame.annotation, annot::Modality::reference, config.proposals, ref_rng);
      const auto sen_props = model::scripted_proposals(
          frame.annotation, annot::Modality::sensed, config.proposals, sen_rng);
      const auto proposals = model::aggregate_proposals(ref_props, sen_props,
                                                        config.proposals.aggregate_iou);
      if (proposals.empty()) continue;
      MiniBatch batch = sample_minibatch(proposals, frame.annotation, config, batch_rng);
      if (batch.samples.empty()) continue;
      if (config.enable_jitter) {
        apply_roi_jitter(batch, config.jitter_sigma0, config.jitter_sigma1, jitter_rng);
      }

      for (auto& [name, tensor] : grads.named_tensors()) {
        (void)name;
        std::fill(tensor->data.begin(), tensor->data.end(), 0.0);
      }
      const StepStats stats = batch_forward_backward(params, feature_cache[frame_idx],
                                                     batch, config, &grads);
      if (!std::isfinite(stats.loss)) {
        throw std::runtime_error("train: non-finite loss at iteration " +
                                 std::to_string(iteration));
      }
      result.loss_trace.push_back(stats.loss);
      result.stats_trace.push_back(stats);

      for (auto& [name, tensor] : params.trainable_tensors(config.enable_rfa, caf)) {
        Tensor* g = grad_of(grads, name);
        Tensor* v = grad_of(velocity, name);
        for (size_t k = 0; k < tensor->numel(); ++k) {
          (*v)[k] = config.momentum * (*v)[k] -
                    lr * ((*g)[k] + config.weight_decay * (*tensor)[k]);
          (*tensor)[k] += (*v)[k];
        }
      }
      ++iteration;
    }
  }
  result.params = std::move(params);
  return result;
}

}  // namespace arcnn::train
