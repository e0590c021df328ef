// SPDX-License-Identifier: Apache-2.0
#include "arcnn/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace arcnn::model {

using nn::FcLayer;
using nn::Tensor;

namespace {

Tensor he_normal(std::vector<size_t> shape, size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : t.data) v = rng.normal(0.0, stddev);
  return t;
}

FcLayer init_fc(size_t out, size_t in, Rng& rng) {
  return FcLayer(he_normal({out, in}, in, rng), Tensor({out}));
}

}  // namespace

Params Params::init(const ModelConfig& config, uint64_t seed) {
  Rng rng(mix_seed(seed, 0x6d6f64656cull));  // independent of data streams
  Params p;
  p.config = config;
  const size_t ci = config.in_channels;
  const size_t cb = config.base_channels;
  const size_t cf = config.feature_channels;
  p.conv1.weights = he_normal({cb, ci, 3, 3}, ci * 9, rng);
  p.conv2.weights = he_normal({cf, cb, 3, 3}, cb * 9, rng);
  p.conv3.weights = he_normal({cf, cf, 3, 3}, cf * 9, rng);
  const size_t region = config.region_feature_size();
  p.rfa.fc1 = init_fc(config.rfa_hidden, 2 * region, rng);
  p.rfa.fc2 = init_fc(2, config.rfa_hidden, rng);
  p.conf_ref.fc1 = init_fc(config.conf_hidden, region, rng);
  p.conf_ref.fc2 = init_fc(2, config.conf_hidden, rng);
  p.conf_sen.fc1 = init_fc(config.conf_hidden, region, rng);
  p.conf_sen.fc2 = init_fc(2, config.conf_hidden, rng);
  // Confidence logits start away from the p1 = 0.5 fixed point, where
  // W = |p1 - p0| would zero the fused features and stall training.
  p.conf_ref.fc2.bias[1] = 1.5;
  p.conf_sen.fc2.bias[1] = 1.5;
  p.det.fc1 = init_fc(config.det_hidden, 2 * region, rng);
  p.det.fc2 = init_fc(6, config.det_hidden, rng);
  return p;
}

std::vector<std::pair<std::string, Tensor*>> Params::named_tensors() {
  return {{"conv1.weight", &conv1.weights},
          {"conv2.weight", &conv2.weights},
          {"conv3.weight", &conv3.weights},
          {"rfa.fc1.weight", &rfa.fc1.weights},
          {"rfa.fc1.bias", &rfa.fc1.bias},
          {"rfa.fc2.weight", &rfa.fc2.weights},
          {"rfa.fc2.bias", &rfa.fc2.bias},
          {"conf_ref.fc1.weight", &conf_ref.fc1.weights},
          {"conf_ref.fc1.bias", &conf_ref.fc1.bias},
          {"conf_ref.fc2.weight", &conf_ref.fc2.weights},
          {"conf_ref.fc2.bias", &conf_ref.fc2.bias},
          {"conf_sen.fc1.weight", &conf_sen.fc1.weights},
          {"conf_sen.fc1.bias", &conf_sen.fc1.bias},
          {"conf_sen.fc2.weight", &conf_sen.fc2.weights},
          {"conf_sen.fc2.bias", &conf_sen.fc2.bias},
          {"det.fc1.weight", &det.fc1.weights},
          {"det.fc1.bias", &det.fc1.bias},
          {"det.fc2.weight", &det.fc2.weights},
          {"det.fc2.bias", &det.fc2.bias}};
}

std::vector<std::pair<std::string, const Tensor*>> Params::named_tensors() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, tensor] : const_cast<Params*>(this)->named_tensors()) {
    out.emplace_back(name, tensor);
  }
  return out;
}

std::vector<std::pair<std::string, Tensor*>> Params::trainable_tensors(
    bool enable_rfa, bool confidence_fusion) {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& [name, tensor] : named_tensors()) {
    if (name.rfind("conv", 0) == 0) continue;  // frozen extractor
    if (!enable_rfa && name.rfind("rfa.", 0) == 0) continue;
    if (!confidence_fusion && name.rfind("conf_", 0) == 0) continue;
    out.emplace_back(name, tensor);
  }
  return out;
}

Tensor conv3x3(const Tensor& input, const Tensor& weights) {
  if (input.rank() != 3 || weights.rank() != 4 || weights.dim(2) != 3 ||
      weights.dim(3) != 3 || weights.dim(1) != input.dim(0)) {
    throw std::invalid_argument("conv3x3: shape mismatch");
  }
  const size_t co = weights.dim(0);
  const size_t ci = weights.dim(1);
  const long h = static_cast<long>(input.dim(1));
  const long w = static_cast<long>(input.dim(2));
  Tensor out({co, static_cast<size_t>(h), static_cast<size_t>(w)});
  for (size_t o = 0; o < co; ++o) {
    double* dst = out.data.data() + o * h * w;
    for (size_t i = 0; i < ci; ++i) {
      const double* src = input.data.data() + i * h * w;
      for (long ky = 0; ky < 3; ++ky) {
        for (long kx = 0; kx < 3; ++kx) {
          const double wv = weights.data[((o * ci + i) * 3 + ky) * 3 + kx];
          if (wv == 0.0) continue;
          const long y_lo = std::max<long>(0, 1 - ky);
          const long y_hi = std::min<long>(h, h + 1 - ky);
          const long x_lo = std::max<long>(0, 1 - kx);
          const long x_hi = std::min<long>(w, w + 1 - kx);
          for (long y = y_lo; y < y_hi; ++y) {
            const double* in_row = src + (y + ky - 1) * w + (kx - 1);
            double* out_row = dst + y * w;
            for (long x = x_lo; x < x_hi; ++x) {
              out_row[x] += wv * in_row[x];
            }
          }
        }
      }
    }
  }
  return out;
}

Tensor max_pool2(const Tensor& input) {
  if (input.rank() != 3 || input.dim(1) % 2 != 0 || input.dim(2) % 2 != 0) {
    throw std::invalid_argument("max_pool2: spatial dims must be even");
  }
  const size_t c_n = input.dim(0);
  const size_t oh = input.dim(1) / 2;
  const size_t ow = input.dim(2) / 2;
  Tensor out({c_n, oh, ow});
  for (size_t c = 0; c < c_n; ++c) {
    for (size_t y = 0; y < oh; ++y) {
      for (size_t x = 0; x < ow; ++x) {
        const double a = input.at3(c, 2 * y, 2 * x);
        const double b = input.at3(c, 2 * y, 2 * x + 1);
        const double d = input.at3(c, 2 * y + 1, 2 * x);
        const double e = input.at3(c, 2 * y + 1, 2 * x + 1);
        out.at3(c, y, x) = std::max(std::max(a, b), std::max(d, e));
      }
    }
  }
  return out;
}

Tensor extract_stream_features(const Tensor& image, const Params& params) {
  if (image.rank() != 3 || image.dim(0) != params.config.in_channels) {
    throw std::invalid_argument("extract_stream_features: bad image shape");
  }
  if (image.dim(1) % 4 != 0 || image.dim(2) % 4 != 0) {
    throw std::invalid_argument("extract_stream_features: spatial dims must be multiples of 4");
  }
  Tensor x = nn::relu(conv3x3(image, params.conv1.weights));
  x = max_pool2(x);
  x = nn::relu(conv3x3(x, params.conv2.weights));
  x = max_pool2(x);
  x = nn::relu(conv3x3(x, params.conv3.weights));
  return x;
}

TwoStreamFeatures extract_features(const Tensor& reference_image,
                                   const Tensor& sensed_image,
                                   const Params& params) {
  if (reference_image.shape != sensed_image.shape) {
    throw std::invalid_argument("extract_features: stream shapes differ");
  }
  TwoStreamFeatures f;
  f.reference = extract_stream_features(reference_image, params);
  f.sensed = extract_stream_features(sensed_image, params);
  f.stride = static_cast<double>(params.config.stride);
  return f;
}

std::vector<geom::ScoredBox> aggregate_proposals(
    std::span<const geom::ScoredBox> reference_proposals,
    std::span<const geom::ScoredBox> sensed_proposals, double iou_threshold) {
  std::vector<geom::ScoredBox> all;
  all.reserve(reference_proposals.size() + sensed_proposals.size());
  all.insert(all.end(), reference_proposals.begin(), reference_proposals.end());
  all.insert(all.end(), sensed_proposals.begin(), sensed_proposals.end());
  std::vector<geom::ScoredBox> kept;
  for (size_t idx : geom::nms(all, iou_threshold)) {
    kept.push_back(all[idx]);
  }
  return kept;
}

std::vector<geom::ScoredBox> scripted_proposals(const annot::FrameAnnotation& frame,
                                                annot::Modality side,
                                                const ProposalConfig& config,
                                                Rng& rng) {
  std::vector<geom::ScoredBox> proposals;
  auto perturb = [&](const geom::Box& gt, double center_noise, double scale_lo,
                     double scale_hi) {
    const double cx = gt.center_x() + rng.uniform(-center_noise, center_noise) * gt.width;
    const double cy = gt.center_y() + rng.uniform(-center_noise, center_noise) * gt.height;
    const double w = gt.width * rng.uniform(scale_lo, scale_hi);
    const double h = gt.height * rng.uniform(scale_lo, scale_hi);
    return geom::Box::from_center(cx, cy, w, h);
  };
  for (const annot::PairedObject& obj : frame.objects) {
    const auto& box = obj.box(side);
    if (!box) continue;
    for (int k = 0; k < config.near_per_object; ++k) {
      proposals.push_back({perturb(*box, config.center_noise, config.scale_lo,
                                   config.scale_hi),
                           rng.uniform(0.6, 1.0)});
    }
    for (int k = 0; k < config.mid_per_object; ++k) {
      proposals.push_back({perturb(*box, config.mid_center_noise, config.mid_scale_lo,
                                   config.mid_scale_hi),
                           rng.uniform(0.25, 0.65)});
    }
  }
  const double img_w = frame.image_width;
  const double img_h = frame.image_height;
  for (int k = 0; k < config.random_count; ++k) {
    const double h = rng.uniform(14.0, std::max(15.0, img_h * 0.45));
    const double w = h * rng.uniform(0.35, 0.8);
    const double x = rng.uniform(0.0, std::max(1.0, img_w - w));
    const double y = rng.uniform(0.0, std::max(1.0, img_h - h));
    proposals.push_back({geom::Box(x, y, w, h), rng.uniform(0.05, 0.35)});
  }
  return proposals;
}

Tensor two_fc_forward(const FcLayer& fc1, const FcLayer& fc2, const Tensor& input,
                      TwoFcCache* cache) {
  Tensor hidden_pre = nn::fc_forward(fc1, input);
  Tensor hidden = nn::relu(hidden_pre);
  Tensor out = nn::fc_forward(fc2, hidden);
  if (cache) {
    cache->input = input;
    cache->hidden_pre = std::move(hidden_pre);
    cache->hidden = hidden;
    cache->out = out;
  }
  return out;
}

namespace {

void fc_backward(const FcLayer& layer, const Tensor& input, const Tensor& d_out,
                 FcLayer& grad, Tensor* d_input) {
  const size_t out = layer.out_dim();
  const size_t in = layer.in_dim();
  for (size_t o = 0; o < out; ++o) {
    const double g = d_out[o];
    grad.bias[o] += g;
    double* grow = grad.weights.data.data() + o * in;
    const double* x = input.data.data();
    for (size_t i = 0; i < in; ++i) grow[i] += g * x[i];
  }
  if (d_input) {
    *d_input = Tensor({in});
    for (size_t o = 0; o < out; ++o) {
      const double g = d_out[o];
      const double* row = layer.weights.data.data() + o * in;
      double* dx = d_input->data.data();
      for (size_t i = 0; i < in; ++i) dx[i] += g * row[i];
    }
  }
}

}  // namespace

void two_fc_backward(const FcLayer& fc1, const FcLayer& fc2, const TwoFcCache& cache,
                     const Tensor& d_out, FcLayer& grad1, FcLayer& grad2,
                     Tensor* d_input) {
  Tensor d_hidden;
  fc_backward(fc2, cache.hidden, d_out, grad2, &d_hidden);
  for (size_t i = 0; i < d_hidden.numel(); ++i) {
    if (cache.hidden_pre[i] <= 0.0) d_hidden[i] = 0.0;
  }
  fc_backward(fc1, cache.input, d_hidden, grad1, d_input);
}

Tensor pool_region(const TwoStreamFeatures& features, const Tensor& map,
                   const geom::Box& pixel_roi, const ModelConfig& config) {
  const double s = features.stride;
  const geom::Box feat_roi(pixel_roi.x_min / s, pixel_roi.y_min / s,
                           pixel_roi.width / s, pixel_roi.height / s);
  return nn::roi_align(map, feat_roi, config.pooled_size, config.pooled_size,
                       config.samples_per_bin);
}

namespace {

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) {
    throw std::invalid_argument("concat_channels: shape mismatch");
  }
  std::vector<size_t> shape = a.shape;
  shape[0] *= 2;
  Tensor out(shape);
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + a.numel());
  return out;
}

}  // namespace

std::vector<RfaResult> rfa_forward_pairs(
    const TwoStreamFeatures& features, std::span<const geom::Box> reference_rois,
    std::span<const geom::Box> sensed_rois, const RfaHead& head,
    const ModelConfig& config,
    const std::vector<geom::ShiftTarget>* injected_shifts) {
  if (reference_rois.empty() || reference_rois.size() != sensed_rois.size()) {
    throw std::invalid_argument("rfa_forward: proposal lists empty or mismatched");
  }
  if (injected_shifts && injected_shifts->size() != reference_rois.size()) {
    throw std::invalid_argument("rfa_forward: injected shift count mismatch");
  }
  const double bound_w = static_cast<double>(features.reference.dim(2)) * features.stride;
  const double bound_h = static_cast<double>(features.reference.dim(1)) * features.stride;

  std::vector<RfaResult> results;
  results.reserve(reference_rois.size());
  for (size_t i = 0; i < reference_rois.size(); ++i) {
    const geom::Box& ref_roi = reference_rois[i];
    const geom::Box& sen_roi = sensed_rois[i];
    RfaResult r;
    if (injected_shifts) {
      r.shift = (*injected_shifts)[i];
    } else {
      const geom::Box ctx_ref =
          geom::enlarge_context(ref_roi, config.context_factor, bound_w, bound_h);
      const geom::Box ctx_sen =
          geom::enlarge_context(sen_roi, config.context_factor, bound_w, bound_h);
      const Tensor pooled_ref = pool_region(features, features.reference, ctx_ref, config);
      const Tensor pooled_sen = pool_region(features, features.sensed, ctx_sen, config);
      const Tensor concat = concat_channels(pooled_ref, pooled_sen).flattened();
      const Tensor pred = two_fc_forward(head.fc1, head.fc2, concat);
      r.shift = geom::ShiftTarget{pred[0], pred[1]};
    }
    r.aligned_region = geom::apply_shift(sen_roi, r.shift);
    r.ref_feature = pool_region(features, features.reference, ref_roi, config);
    r.aligned_sensed = pool_region(features, features.sensed, r.aligned_region, config);
    results.push_back(std::move(r));
  }
  return results;
}

std::vector<RfaResult> rfa_forward(
    const TwoStreamFeatures& features, std::span<const geom::Box> proposals,
    const RfaHead& head, const ModelConfig& config,
    const std::vector<geom::ShiftTarget>* injected_shifts) {
  return rfa_forward_pairs(features, proposals, proposals, head, config,
                           injected_shifts);
}

FusionWeights weights_from_probs(double p1_r, double p1_s) {
  FusionWeights w;
  w.p1_r = p1_r;
  w.p1_s = p1_s;
  w.w_r = std::abs(p1_r - (1.0 - p1_r));
  w.w_s = std::abs(p1_s - (1.0 - p1_s));
  w.w_d = 1.0 - std::abs(p1_r - p1_s);
  return w;
}

FusionWeights confidence_weights(const Tensor& ref_feature, const Tensor& sensed_feature,
                                 const ConfidenceBranch& ref_branch,
                                 const ConfidenceBranch& sen_branch,
                                 ConfidenceCache* cache) {
  const Tensor ref_logits = two_fc_forward(ref_branch.fc1, ref_branch.fc2,
                                           ref_feature.flattened(),
                                           cache ? &cache->ref_fc : nullptr);
  const Tensor sen_logits = two_fc_forward(sen_branch.fc1, sen_branch.fc2,
                                           sensed_feature.flattened(),
                                           cache ? &cache->sen_fc : nullptr);
  const auto [p0_r, p1_r] = nn::softmax2(ref_logits[0], ref_logits[1]);
  const auto [p0_s, p1_s] = nn::softmax2(sen_logits[0], sen_logits[1]);
  (void)p0_r;
  (void)p0_s;
  return weights_from_probs(p1_r, p1_s);
}

std::string to_string(FusionMode mode) {
  return mode == FusionMode::confidence_aware ? "caf" : "naive";
}

FusionMode fusion_mode_from_string(const std::string& s) {
  if (s == "caf" || s == "confidence_aware") return FusionMode::confidence_aware;
  if (s == "naive" || s == "naive_concat") return FusionMode::naive_concat;
  throw std::runtime_error("unknown fusion mode '" + s + "'");
}

Tensor fuse(const Tensor& ref_feature, const Tensor& sensed_feature,
            const FusionWeights& weights, FusionMode mode) {
  if (ref_feature.shape != sensed_feature.shape) {
    throw std::invalid_argument("fuse: feature shapes differ");
  }
  Tensor out = concat_channels(ref_feature, sensed_feature);
  if (mode == FusionMode::confidence_aware) {
    const size_t half = ref_feature.numel();
    const double ws = weights.w_s * weights.w_d;
    for (size_t i = 0; i < half; ++i) out[i] *= weights.w_r;
    for (size_t i = half; i < out.numel(); ++i) out[i] *= ws;
  }
  return out;
}

DetOutput detect_head(const Tensor& fused_feature, const DetectHead& head,
                      TwoFcCache* cache) {
  const Tensor out = two_fc_forward(head.fc1, head.fc2, fused_feature.flattened(), cache);
  if (out.numel() != 6) {
    throw std::invalid_argument("detect_head: head output must have 6 values");
  }
  DetOutput result;
  result.logit0 = out[0];
  result.logit1 = out[1];
  for (size_t k = 0; k < 4; ++k) result.deltas[k] = out[2 + k];
  return result;
}

std::array<double, 4> encode_deltas(const geom::Box& proposal, const geom::Box& gt) {
  return {(gt.center_x() - proposal.center_x()) / proposal.width,
          (gt.center_y() - proposal.center_y()) / proposal.height,
          std::log(gt.width / proposal.width),
          std::log(gt.height / proposal.height)};
}

geom::Box decode_deltas(const geom::Box& proposal, const std::array<double, 4>& deltas) {
  const double cx = proposal.center_x() + deltas[0] * proposal.width;
  const double cy = proposal.center_y() + deltas[1] * proposal.height;
  const double w = proposal.width * std::exp(std::clamp(deltas[2], -6.0, 6.0));
  const double h = proposal.height * std::exp(std::clamp(deltas[3], -6.0, 6.0));
  return geom::Box::from_center(cx, cy, w, h);
}

double shift_loss(std::span<const geom::ShiftTarget> predicted,
                  std::span<const geom::ShiftTarget> targets,
                  std::span<const int> labels) {
  if (predicted.size() != targets.size() || predicted.size() != labels.size()) {
    throw std::invalid_argument("shift_loss: misaligned lists");
  }
  size_t n_shift = 0;
  double sum = 0.0;
  for (size_t i = 0; i < predicted.size(); ++i) {
    if (labels[i] != 1) continue;
    ++n_shift;
    sum += nn::smooth_l1(predicted[i].tx - targets[i].tx) +
           nn::smooth_l1(predicted[i].ty - targets[i].ty);
  }
  if (n_shift == 0) return 0.0;
  return sum / static_cast<double>(n_shift);
}

double total_loss(double cls_term, double shift_term, double reg_term, double lambda) {
  return cls_term + lambda * shift_term + reg_term;
}

double cross_entropy2(double logit0, double logit1, int label) {
  const double m = std::max(logit0, logit1);
  const double lse = m + std::log(std::exp(logit0 - m) + std::exp(logit1 - m));
  return lse - (label == 1 ? logit1 : logit0);
}

void save_checkpoint(const std::filesystem::path& path, const Params& params) {
  nlohmann::json doc;
  doc["format"] = kCheckpointFormat;
  const ModelConfig& c = params.config;
  doc["config"] = {{"in_channels", c.in_channels},
                   {"base_channels", c.base_channels},
                   {"feature_channels", c.feature_channels},
                   {"stride", c.stride},
                   {"pooled_size", c.pooled_size},
                   {"samples_per_bin", c.samples_per_bin},
                   {"rfa_hidden", c.rfa_hidden},
                   {"conf_hidden", c.conf_hidden},
                   {"det_hidden", c.det_hidden},
                   {"context_factor", c.context_factor}};
  nlohmann::json jparams = nlohmann::json::object();
  for (const auto& [name, tensor] : params.named_tensors()) {
    jparams[name] = {{"shape", tensor->shape}, {"data", tensor->data}};
  }
  doc["params"] = std::move(jparams);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << doc.dump() << "\n";
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Params load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
  if (!doc.contains("format") || doc["format"] != kCheckpointFormat) {
    throw std::runtime_error(path.string() + ": checkpoint format mismatch (expected " +
                             std::string(kCheckpointFormat) + ")");
  }
  ModelConfig c;
  const nlohmann::json& jc = doc.at("config");
  c.in_channels = jc.at("in_channels").get<size_t>();
  c.base_channels = jc.at("base_channels").get<size_t>();
  c.feature_channels = jc.at("feature_channels").get<size_t>();
  c.stride = jc.at("stride").get<size_t>();
  c.pooled_size = jc.at("pooled_size").get<size_t>();
  c.samples_per_bin = jc.at("samples_per_bin").get<size_t>();
  c.rfa_hidden = jc.at("rfa_hidden").get<size_t>();
  c.conf_hidden = jc.at("conf_hidden").get<size_t>();
  c.det_hidden = jc.at("det_hidden").get<size_t>();
  c.context_factor = jc.at("context_factor").get<double>();
  Params params = Params::init(c, 0);
  const nlohmann::json& jp = doc.at("params");
  for (auto& [name, tensor] : params.named_tensors()) {
    if (!jp.contains(name)) {
      throw std::runtime_error(path.string() + ": missing parameter '" + name + "'");
    }
    const nlohmann::json& jt = jp.at(name);
    const auto shape = jt.at("shape").get<std::vector<size_t>>();
    auto data = jt.at("data").get<std::vector<double>>();
    if (shape != tensor->shape) {
      throw std::runtime_error(path.string() + ": shape mismatch for '" + name + "'");
    }
    tensor->data = std::move(data);
    if (!tensor->all_finite()) {
      throw std::runtime_error(path.string() + ": non-finite values in '" + name + "'");
    }
  }
  return params;
}

}  // namespace arcnn::model
