// SPDX-License-Identifier: Apache-2.0
#include "arcnn/eval.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <thread>

#include <json.hpp>

namespace arcnn::eval {

using annot::Detection;
using annot::FrameAnnotation;
using annot::Modality;
using geom::Box;

FrameMatch match_frame(std::span<const Detection> detections,
                       std::span<const GtEntry> ground_truth, double iou_threshold) {
  for (size_t i = 1; i < detections.size(); ++i) {
    if (detections[i - 1].score < detections[i].score) {
      throw std::invalid_argument("match_frame: detections not sorted by descending score");
    }
  }
  FrameMatch result;
  result.outcomes.assign(detections.size(), DetOutcome::false_positive);
  result.matched_gt.assign(detections.size(), -1);
  result.gt_matched.assign(ground_truth.size(), false);
  for (size_t d = 0; d < detections.size(); ++d) {
    double best_iou = iou_threshold;
    int best = -1;
    for (size_t g = 0; g < ground_truth.size(); ++g) {
      if (result.gt_matched[g]) continue;
      const double v = geom::iou(detections[d].box, ground_truth[g].box);
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best < 0) continue;
    result.gt_matched[best] = true;
    result.matched_gt[d] = best;
    result.outcomes[d] = ground_truth[best].ignore ? DetOutcome::ignored
                                                   : DetOutcome::true_positive;
  }
  return result;
}

namespace {

// Canonical detection order: score descending, then box coordinates, so
// results are invariant to input permutation.
bool canonical_less(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.box.x_min != b.box.x_min) return a.box.x_min < b.box.x_min;
  if (a.box.y_min != b.box.y_min) return a.box.y_min < b.box.y_min;
  if (a.box.width != b.box.width) return a.box.width < b.box.width;
  return a.box.height < b.box.height;
}

std::vector<GtEntry> modality_gt(const FrameAnnotation& frame, Modality modality) {
  std::vector<GtEntry> gt;
  for (const annot::PairedObject& obj : frame.objects) {
    const auto& primary = obj.box(modality);
    if (primary) {
      gt.push_back({*primary, obj.ignore});
    } else {
      // Objects lacking the scored modality's box stay ignorable through the
      // box they do have.
      const auto& other = obj.box(modality == Modality::reference
                                      ? Modality::sensed
                                      : Modality::reference);
      gt.push_back({*other, true});
    }
  }
  return gt;
}

std::string fmt_double(double v) {
  char buf[40];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, p);
}

}  // namespace

MrResult mr_score(std::span<const FrameAnnotation> frames,
                  std::span<const Detection> detections, Modality modality) {
  std::map<std::string, size_t> frame_index;
  for (size_t i = 0; i < frames.size(); ++i) {
    frame_index.emplace(frames[i].frame_id, i);
  }
  std::vector<std::vector<Detection>> per_frame(frames.size());
  for (const Detection& det : detections) {
    auto it = frame_index.find(det.frame_id);
    if (it == frame_index.end()) {
      throw std::runtime_error("mr_score: detection references unknown frame '" +
                               det.frame_id + "'");
    }
    per_frame[it->second].push_back(det);
  }

  size_t total_gt = 0;
  struct Scored {
    double score;
    DetOutcome outcome;
  };
  std::vector<Scored> all;
  all.reserve(detections.size());
  for (size_t i = 0; i < frames.size(); ++i) {
    const std::vector<GtEntry> gt = modality_gt(frames[i], modality);
    for (const GtEntry& e : gt) {
      if (!e.ignore) ++total_gt;
    }
    std::sort(per_frame[i].begin(), per_frame[i].end(), canonical_less);
    const FrameMatch match = match_frame(per_frame[i], gt, kMatchIouThreshold);
    for (size_t d = 0; d < per_frame[i].size(); ++d) {
      all.push_back({per_frame[i][d].score, match.outcomes[d]});
    }
  }

  MrResult result;
  if (total_gt == 0) {
    result.has_gt = false;
    return result;
  }
  result.has_gt = true;

  std::sort(all.begin(), all.end(),
            [](const Scored& a, const Scored& b) { return a.score > b.score; });
  const double num_frames = static_cast<double>(frames.size());
  size_t tp = 0;
  size_t fp = 0;
  std::vector<EvalCurve::Point> points;  // threshold-descending while building
  std::vector<double> thresholds;
  for (size_t i = 0; i < all.size(); ++i) {
    if (all[i].outcome == DetOutcome::true_positive) ++tp;
    if (all[i].outcome == DetOutcome::false_positive) ++fp;
    const bool boundary = i + 1 == all.size() || all[i + 1].score != all[i].score;
    if (!boundary) continue;
    points.push_back({static_cast<double>(fp) / num_frames,
                      static_cast<double>(total_gt - tp) / static_cast<double>(total_gt)});
    thresholds.push_back(all[i].score);
  }
  std::reverse(points.begin(), points.end());
  std::reverse(thresholds.begin(), thresholds.end());
  result.curve.points = points;
  result.curve.thresholds = thresholds;

  double log_sum = 0.0;
  for (int k = 0; k < kFppiSamplePoints; ++k) {
    const double f = std::pow(10.0, -2.0 + 0.25 * static_cast<double>(k));
    double miss = 1.0;  // the empty operating point (no detections kept)
    for (const EvalCurve::Point& p : points) {
      if (p.fppi <= f) miss = std::min(miss, p.miss_rate);
    }
    log_sum += std::log(std::max(miss, kMissRateFloor));
  }
  result.mr = std::exp(log_sum / static_cast<double>(kFppiSamplePoints));
  return result;
}

std::vector<std::pair<int, int>> full_grid() {
  std::vector<std::pair<int, int>> modes;
  for (int dx = -6; dx <= 6; ++dx) {
    for (int dy = -6; dy <= 6; ++dy) modes.emplace_back(dx, dy);
  }
  return modes;
}

std::vector<std::pair<int, int>> direction_grid() {
  std::set<std::pair<int, int>> modes;
  for (int k = -10; k <= 10; ++k) {
    modes.emplace(k, 0);    // S0
    modes.emplace(k, k);    // S45
    modes.emplace(0, k);    // S90
    modes.emplace(k, -k);   // S135
  }
  return {modes.begin(), modes.end()};
}

DirectionStats direction_metrics(std::span<const GridEntry> grid) {
  std::map<std::pair<int, int>, double> lookup;
  for (const GridEntry& e : grid) lookup[{e.dx, e.dy}] = e.mr;
  auto stat_for = [&](auto mode_of) {
    std::vector<double> values;
    for (int k = -10; k <= 10; ++k) {
      const std::pair<int, int> mode = mode_of(k);
      auto it = lookup.find(mode);
      if (it == lookup.end()) {
        throw std::runtime_error("direction_metrics: missing mode (" +
                                 std::to_string(mode.first) + "," +
                                 std::to_string(mode.second) + ")");
      }
      values.push_back(it->second);
    }
    DirectionStat s;
    for (double v : values) s.mu += v;
    s.mu /= static_cast<double>(values.size());
    double acc = 0.0;
    for (double v : values) acc += (v - s.mu) * (v - s.mu);
    s.sigma = std::sqrt(acc / static_cast<double>(values.size()));
    return s;
  };
  DirectionStats stats;
  stats.s0 = stat_for([](int k) { return std::pair{k, 0}; });
  stats.s45 = stat_for([](int k) { return std::pair{k, k}; });
  stats.s90 = stat_for([](int k) { return std::pair{0, k}; });
  stats.s135 = stat_for([](int k) { return std::pair{k, -k}; });
  return stats;
}

SweepResult shift_grid_sweep(const FrameDetector& detector,
                             const synth::Dataset& dataset,
                             std::span<const std::pair<int, int>> shifts, int threads,
                             double reasonable_min_height, bool allow_occluded) {
  SweepResult result;
  result.grid.resize(shifts.size());
  std::vector<std::string> errors(shifts.size());

  auto run_mode = [&](size_t idx) {
    const auto [dx, dy] = shifts[idx];
    try {
      auto shifted = annot::shift_all_sensed(dataset.annotations(),
                                             static_cast<double>(dx),
                                             static_cast<double>(dy));
      std::vector<Detection> detections;
      for (size_t i = 0; i < dataset.frames.size(); ++i) {
        const synth::Frame& frame = dataset.frames[i];
        const nn::Tensor sensed = nn::translate_image(frame.sensed_image, dx, dy);
        auto dets = detector(shifted[i], frame.reference_image, sensed);
        detections.insert(detections.end(), dets.begin(), dets.end());
      }
      auto filtered = annot::reasonable_filter(shifted, reasonable_min_height,
                                               allow_occluded);
      const MrResult mr = mr_score(filtered, detections, Modality::reference);
      if (!mr.has_gt) {
        throw std::runtime_error("no ground truth after filtering");
      }
      result.grid[idx] = {dx, dy, mr.mr};
    } catch (const std::exception& e) {
      errors[idx] = e.what();
    }
  };

  const int worker_count =
      std::max(1, std::min<int>(threads, static_cast<int>(shifts.size())));
  if (worker_count <= 1) {
    for (size_t i = 0; i < shifts.size(); ++i) run_mode(i);
  } else {
    std::atomic<size_t> next{0};
    std::vector<std::thread> workers;
    for (int t = 0; t < worker_count; ++t) {
      workers.emplace_back([&] {
        while (true) {
          const size_t i = next.fetch_add(1);
          if (i >= shifts.size()) break;
          run_mode(i);
        }
      });
    }
    for (std::thread& w : workers) w.join();
  }

  for (size_t i = 0; i < shifts.size(); ++i) {
    if (!errors[i].empty()) {
      throw std::runtime_error("shift mode (" + std::to_string(shifts[i].first) + "," +
                               std::to_string(shifts[i].second) + ") failed: " +
                               errors[i]);
    }
  }
  std::sort(result.grid.begin(), result.grid.end(), [](const GridEntry& a, const GridEntry& b) {
    return std::pair{a.dx, a.dy} < std::pair{b.dx, b.dy};
  });

  std::set<std::pair<int, int>> have;
  for (const GridEntry& e : result.grid) have.emplace(e.dx, e.dy);
  bool covered = true;
  for (const auto& mode : direction_grid()) {
    if (!have.count(mode)) {
      covered = false;
      break;
    }
  }
  if (covered) result.directions = direction_metrics(result.grid);
  return result;
}

namespace {

nlohmann::json directions_to_json(const DirectionStats& d) {
  auto one = [](const DirectionStat& s) {
    return nlohmann::json{{"mu", s.mu}, {"sigma", s.sigma}};
  };
  return {{"S0", one(d.s0)}, {"S45", one(d.s45)}, {"S90", one(d.s90)},
          {"S135", one(d.s135)}};
}

}  // namespace

void emit_report(const Report& report, const std::filesystem::path& path,
                 ReportFormat format) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("emit_report: cannot open " + path.string());
  if (format == ReportFormat::json) {
    nlohmann::json doc;
    doc["schema"] = kReportSchema;
    if (!report.mr) {
      doc["mr"] = nullptr;
    } else if (!report.mr->has_gt) {
      doc["mr"] = "no-gt";
    } else {
      doc["mr"] = report.mr->mr;
    }
    nlohmann::json curve = nlohmann::json::array();
    if (report.mr) {
      for (const EvalCurve::Point& p : report.mr->curve.points) {
        curve.push_back(nlohmann::json::array({p.fppi, p.miss_rate}));
      }
    }
    doc["curve"] = std::move(curve);
    nlohmann::json grid = nlohmann::json::array();
    for (const GridEntry& e : report.grid) {
      grid.push_back({{"dx", e.dx}, {"dy", e.dy}, {"mr", e.mr}});
    }
    doc["grid"] = std::move(grid);
    doc["directions"] =
        report.directions ? directions_to_json(*report.directions) : nlohmann::json();
    out << doc.dump(2) << "\n";
  } else {
    out << "key,dx,dy,mr,mu,sigma\n";
    for (const GridEntry& e : report.grid) {
      out << "grid," << e.dx << "," << e.dy << "," << fmt_double(e.mr) << ",,\n";
    }
    if (report.directions) {
      const DirectionStats& d = *report.directions;
      const std::pair<const char*, const DirectionStat*> rows[] = {
          {"S0", &d.s0}, {"S45", &d.s45}, {"S90", &d.s90}, {"S135", &d.s135}};
      for (const auto& [name, stat] : rows) {
        out << name << ",,,," << fmt_double(stat->mu) << "," << fmt_double(stat->sigma)
            << "\n";
      }
    }
  }
  if (!out) throw std::runtime_error("emit_report: write failed for " + path.string());
}

Report parse_report_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  nlohmann::json doc = nlohmann::json::parse(in);
  if (!doc.contains("schema") || doc["schema"] != kReportSchema) {
    throw std::runtime_error(path.string() + ": report schema mismatch");
  }
  Report report;
  const nlohmann::json& jmr = doc.at("mr");
  if (!jmr.is_null()) {
    MrResult mr;
    if (jmr.is_string()) {
      mr.has_gt = false;
    } else {
      mr.has_gt = true;
      mr.mr = jmr.get<double>();
    }
    for (const nlohmann::json& jp : doc.at("curve")) {
      mr.curve.points.push_back({jp[0].get<double>(), jp[1].get<double>()});
    }
    report.mr = std::move(mr);
  }
  for (const nlohmann::json& je : doc.at("grid")) {
    report.grid.push_back({je.at("dx").get<int>(), je.at("dy").get<int>(),
                           je.at("mr").get<double>()});
  }
  if (!doc.at("directions").is_null()) {
    DirectionStats d;
    auto one = [&](const char* key) {
      const nlohmann::json& js = doc["directions"].at(key);
      return DirectionStat{js.at("mu").get<double>(), js.at("sigma").get<double>()};
    };
    d.s0 = one("S0");
    d.s45 = one("S45");
    d.s90 = one("S90");
    d.s135 = one("S135");
    report.directions = d;
  }
  return report;
}

Detector::Detector(model::Params params, DetectorConfig config)
    : params_(std::move(params)), config_(std::move(config)) {}

std::vector<Detection> Detector::detect(const FrameAnnotation& annotation,
                                        const nn::Tensor& reference_image,
                                        const nn::Tensor& sensed_image) const {
  const model::TwoStreamFeatures features =
      model::extract_features(reference_image, sensed_image, params_);
  Rng frame_rng(mix_seed(config_.seed, fnv1a64(annotation.frame_id)));
  Rng ref_rng = frame_rng.derive(1);
  Rng sen_rng = frame_rng.derive(2);
  const auto ref_props = model::scripted_proposals(annotation, Modality::reference,
                                                   config_.proposals, ref_rng);
  const auto sen_props = model::scripted_proposals(annotation, Modality::sensed,
                                                   config_.proposals, sen_rng);
  const auto proposals = model::aggregate_proposals(ref_props, sen_props,
                                                    config_.proposals.aggregate_iou);
  if (proposals.empty()) return {};
  std::vector<Box> boxes;
  boxes.reserve(proposals.size());
  for (const geom::ScoredBox& p : proposals) boxes.push_back(p.box);

  std::vector<model::RfaResult> regions;
  if (config_.enable_rfa) {
    regions = model::rfa_forward(features, boxes, params_.rfa, params_.config);
  } else {
    const std::vector<geom::ShiftTarget> zeros(boxes.size());
    regions = model::rfa_forward(features, boxes, params_.rfa, params_.config, &zeros);
  }

  std::vector<geom::ScoredBox> decoded;
  decoded.reserve(boxes.size());
  for (size_t i = 0; i < boxes.size(); ++i) {
    model::FusionWeights weights;
    if (config_.fusion == model::FusionMode::confidence_aware) {
      weights = model::confidence_weights(regions[i].ref_feature,
                                          regions[i].aligned_sensed,
                                          params_.conf_ref, params_.conf_sen);
    }
    const nn::Tensor fused = model::fuse(regions[i].ref_feature,
                                         regions[i].aligned_sensed, weights,
                                         config_.fusion);
    const model::DetOutput out = model::detect_head(fused, params_.det);
    const auto [p0, p1] = nn::softmax2(out.logit0, out.logit1);
    (void)p0;
    decoded.push_back({model::decode_deltas(boxes[i], out.deltas), p1});
  }
  std::vector<Detection> detections;
  for (size_t idx : geom::nms(decoded, config_.nms_threshold)) {
    detections.push_back({annotation.frame_id, decoded[idx].box, decoded[idx].score,
                          Modality::reference});
  }
  return detections;
}

std::vector<Detection> Detector::detect(const synth::Frame& frame) const {
  return detect(frame.annotation, frame.reference_image, frame.sensed_image);
}

FrameDetector Detector::as_frame_detector() const {
  return [this](const FrameAnnotation& annotation, const nn::Tensor& ref,
                const nn::Tensor& sen) { return detect(annotation, ref, sen); };
}

}  // namespace arcnn::eval
