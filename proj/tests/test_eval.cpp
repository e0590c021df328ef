// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "arcnn/eval.hpp"

using namespace arcnn;
using annot::Detection;
using annot::FrameAnnotation;
using annot::Modality;
using annot::PairedObject;
using geom::Box;

namespace {

PairedObject paired(int64_t uid, Box ref) {
  PairedObject obj;
  obj.uid = uid;
  obj.reference_box = ref;
  obj.sensed_box = ref;
  obj.paired = true;
  return obj;
}

// Exhaustive oracle: for every candidate threshold, re-match every frame from
// scratch, then apply the same floor/step sampling convention.
double mr_oracle(const std::vector<FrameAnnotation>& frames,
                 const std::vector<Detection>& detections, Modality modality) {
  std::set<double> scores;
  for (const Detection& d : detections) scores.insert(d.score);
  struct Point {
    double fppi, miss;
  };
  std::vector<Point> points;
  size_t total_gt = 0;
  for (const FrameAnnotation& f : frames) {
    for (const PairedObject& o : f.objects) {
      if (o.box(modality) && !o.ignore) ++total_gt;
    }
  }
  auto evaluate = [&](double threshold) {
    size_t tp = 0, fp = 0;
    for (const FrameAnnotation& frame : frames) {
      std::vector<Detection> dets;
      for (const Detection& d : detections) {
        if (d.frame_id == frame.frame_id && d.score >= threshold) dets.push_back(d);
      }
      std::sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.box.x_min != b.box.x_min) return a.box.x_min < b.box.x_min;
        if (a.box.y_min != b.box.y_min) return a.box.y_min < b.box.y_min;
        if (a.box.width != b.box.width) return a.box.width < b.box.width;
        return a.box.height < b.box.height;
      });
      std::vector<eval::GtEntry> gt;
      for (const PairedObject& o : frame.objects) {
        if (o.box(modality)) {
          gt.push_back({*o.box(modality), o.ignore});
        } else {
          gt.push_back({modality == Modality::reference ? *o.sensed_box
                                                        : *o.reference_box,
                        true});
        }
      }
      std::vector<bool> taken(gt.size(), false);
      for (const Detection& d : dets) {
        double best = 0.5;
        int best_g = -1;
        for (size_t g = 0; g < gt.size(); ++g) {
          if (taken[g]) continue;
          const double v = geom::iou(d.box, gt[g].box);
          if (v > best) {
            best = v;
            best_g = static_cast<int>(g);
          }
        }
        if (best_g < 0) {
          ++fp;
        } else {
          taken[best_g] = true;
          if (!gt[best_g].ignore) ++tp;
        }
      }
    }
    points.push_back({static_cast<double>(fp) / frames.size(),
                      static_cast<double>(total_gt - tp) / total_gt});
  };
  for (double s : scores) evaluate(s);
  double log_sum = 0.0;
  for (int k = 0; k < 9; ++k) {
    const double f = std::pow(10.0, -2.0 + 0.25 * k);
    double miss = 1.0;
    for (const Point& p : points) {
      if (p.fppi <= f) miss = std::min(miss, p.miss);
    }
    log_sum += std::log(std::max(miss, 1e-4));
  }
  return std::exp(log_sum / 9.0);
}

std::vector<FrameAnnotation> fixture_frames() {
  std::vector<FrameAnnotation> frames;
  for (int f = 0; f < 3; ++f) {
    FrameAnnotation frame;
    frame.frame_id = "f" + std::to_string(f);
    frame.image_width = frame.image_height = 200;
    frames.push_back(frame);
  }
  frames[0].objects.push_back(paired(0, Box(10, 10, 20, 40)));
  frames[0].objects.push_back(paired(1, Box(60, 20, 20, 40)));
  frames[1].objects.push_back(paired(2, Box(30, 30, 25, 50)));
  frames[1].objects.push_back(paired(3, Box(100, 40, 20, 45)));
  frames[2].objects.push_back(paired(4, Box(50, 60, 22, 44)));
  return frames;
}

}  // namespace

TEST_CASE("match_frame basics") {
  const std::vector<eval::GtEntry> gt = {{Box(10, 10, 20, 40), false}};
  std::vector<Detection> dets = {{"f", Box(11, 11, 20, 40), 0.9, Modality::reference}};
  auto m = eval::match_frame(dets, gt, 0.5);
  CHECK(m.outcomes[0] == eval::DetOutcome::true_positive);
  CHECK(m.gt_matched[0]);

  m = eval::match_frame(std::vector<Detection>{}, gt, 0.5);
  CHECK_FALSE(m.gt_matched[0]);  // one miss

  // ignore-marked GT absorbs the detection: neither TP nor FP
  const std::vector<eval::GtEntry> ign = {{Box(10, 10, 20, 40), true}};
  m = eval::match_frame(dets, ign, 0.5);
  CHECK(m.outcomes[0] == eval::DetOutcome::ignored);
}

TEST_CASE("match_frame equals an ordered-assignment oracle on random instances") {
  Rng rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<eval::GtEntry> gt;
    for (int g = 0; g < 5; ++g) {
      gt.push_back({Box(rng.uniform(0, 150), rng.uniform(0, 150), rng.uniform(10, 40),
                        rng.uniform(10, 40)),
                    rng.uniform() < 0.2});
    }
    std::vector<Detection> dets;
    for (int d = 0; d < 10; ++d) {
      const eval::GtEntry& base = gt[static_cast<size_t>(rng.uniform_int(0, 4))];
      dets.push_back({"f",
                      Box(base.box.x_min + rng.uniform(-8, 8),
                          base.box.y_min + rng.uniform(-8, 8),
                          base.box.width * rng.uniform(0.7, 1.3),
                          base.box.height * rng.uniform(0.7, 1.3)),
                      rng.uniform(0.0, 1.0), Modality::reference});
    }
    std::sort(dets.begin(), dets.end(),
              [](const Detection& a, const Detection& b) { return a.score > b.score; });
    const auto got = eval::match_frame(dets, gt, 0.5);

    // oracle: same greedy rule, written independently
    std::vector<bool> taken(gt.size(), false);
    for (size_t d = 0; d < dets.size(); ++d) {
      double best = 0.5;
      int pick = -1;
      for (size_t g = 0; g < gt.size(); ++g) {
        const double v = taken[g] ? 0.0 : geom::iou(dets[d].box, gt[g].box);
        if (v > best) {
          best = v;
          pick = static_cast<int>(g);
        }
      }
      if (pick < 0) {
        CHECK(got.outcomes[d] == eval::DetOutcome::false_positive);
      } else {
        taken[pick] = true;
        CHECK(got.matched_gt[d] == pick);
        CHECK(got.outcomes[d] == (gt[pick].ignore ? eval::DetOutcome::ignored
                                                  : eval::DetOutcome::true_positive));
      }
    }
  }
}

TEST_CASE("mr_score: perfect detector reaches the floor, empty detector gives 1") {
  const auto frames = fixture_frames();
  std::vector<Detection> perfect;
  for (const auto& frame : frames) {
    for (const auto& obj : frame.objects) {
      perfect.push_back({frame.frame_id, *obj.reference_box, 0.99, Modality::reference});
    }
  }
  const auto top = eval::mr_score(frames, perfect, Modality::reference);
  REQUIRE(top.has_gt);
  CHECK(top.mr == doctest::Approx(eval::kMissRateFloor).epsilon(1e-9));

  const auto none = eval::mr_score(frames, {}, Modality::reference);
  REQUIRE(none.has_gt);
  CHECK(none.mr == doctest::Approx(1.0));

  const std::vector<FrameAnnotation> empty_frames = {FrameAnnotation{"e", 10, 10, {}}};
  const auto no_gt = eval::mr_score(empty_frames, {}, Modality::reference);
  CHECK_FALSE(no_gt.has_gt);
}

TEST_CASE("mr_score equals the exhaustive threshold-enumeration oracle") {
  Rng rng(7);
  const auto frames = fixture_frames();
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<Detection> dets;
    const int n_det = 8;
    for (int d = 0; d < n_det; ++d) {
      const auto& frame = frames[static_cast<size_t>(rng.uniform_int(0, 2))];
      Box target = frame.objects.empty()
                       ? Box(rng.uniform(0, 150), rng.uniform(0, 150), 20, 40)
                       : *frame.objects[static_cast<size_t>(rng.uniform_int(
                              0, static_cast<int64_t>(frame.objects.size()) - 1))]
                              .reference_box;
      dets.push_back({frame.frame_id,
                      Box(target.x_min + rng.uniform(-10, 10),
                          target.y_min + rng.uniform(-10, 10),
                          target.width * rng.uniform(0.6, 1.4),
                          target.height * rng.uniform(0.6, 1.4)),
                      rng.uniform(0.0, 1.0), Modality::reference});
    }
    const auto got = eval::mr_score(frames, dets, Modality::reference);
    const double expect = mr_oracle(frames, dets, Modality::reference);
    REQUIRE(got.has_gt);
    CHECK(std::abs(got.mr - expect) < 1e-12);
  }
}

TEST_CASE("mr_score curve is monotone and permutation invariant") {
  Rng rng(11);
  const auto frames = fixture_frames();
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<Detection> dets;
    for (int d = 0; d < 12; ++d) {
      dets.push_back({frames[static_cast<size_t>(rng.uniform_int(0, 2))].frame_id,
                      Box(rng.uniform(0, 150), rng.uniform(0, 150),
                          rng.uniform(10, 40), rng.uniform(20, 60)),
                      rng.uniform(0.0, 1.0), Modality::reference});
    }
    const auto a = eval::mr_score(frames, dets, Modality::reference);
    // curve stored threshold-ascending: fppi non-increasing, miss non-decreasing
    for (size_t i = 1; i < a.curve.points.size(); ++i) {
      CHECK(a.curve.points[i].fppi <= a.curve.points[i - 1].fppi);
      CHECK(a.curve.points[i].miss_rate >= a.curve.points[i - 1].miss_rate);
      CHECK(a.curve.thresholds[i] > a.curve.thresholds[i - 1]);
      CHECK(a.curve.points[i].miss_rate >= 0.0);
      CHECK(a.curve.points[i].miss_rate <= 1.0);
    }
    std::vector<Detection> shuffled = dets;
    for (size_t i = shuffled.size(); i > 1; --i) {
      std::swap(shuffled[i - 1],
                shuffled[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
    }
    const auto b = eval::mr_score(frames, shuffled, Modality::reference);
    CHECK(a.mr == b.mr);
  }
}

TEST_CASE("mr_score: removing false positives never hurts") {
  Rng rng(13);
  const auto frames = fixture_frames();
  std::vector<Detection> dets;
  for (const auto& frame : frames) {
    for (const auto& obj : frame.objects) {
      dets.push_back({frame.frame_id,
                      Box(obj.reference_box->x_min + rng.uniform(-3, 3),
                          obj.reference_box->y_min + rng.uniform(-3, 3),
                          obj.reference_box->width, obj.reference_box->height),
                      rng.uniform(0.3, 1.0), Modality::reference});
    }
  }
  std::vector<Detection> with_fps = dets;
  for (int i = 0; i < 6; ++i) {
    with_fps.push_back({frames[i % 3].frame_id,
                        Box(150 + rng.uniform(0, 40), 150 + rng.uniform(0, 40), 15, 30),
                        rng.uniform(0.0, 1.0), Modality::reference});
  }
  const auto worse = eval::mr_score(frames, with_fps, Modality::reference);
  const auto better = eval::mr_score(frames, dets, Modality::reference);
  CHECK(better.mr <= worse.mr);

  // a no-match detection below every existing score leaves MR unchanged
  std::vector<Detection> appended = dets;
  appended.push_back({frames[0].frame_id, Box(180, 180, 10, 10), 1e-6,
                      Modality::reference});
  const auto same = eval::mr_score(frames, appended, Modality::reference);
  CHECK(same.mr == doctest::Approx(better.mr).epsilon(1e-12));
}

TEST_CASE("grid constructors") {
  CHECK(eval::full_grid().size() == 169);
  CHECK(eval::direction_grid().size() == 81);  // 4 x 21 with the origin shared
}

TEST_CASE("direction_metrics closed forms") {
  std::vector<eval::GridEntry> grid;
  for (const auto& [dx, dy] : eval::direction_grid()) {
    grid.push_back({dx, dy, 0.37});
  }
  auto stats = eval::direction_metrics(grid);
  for (const auto* s : {&stats.s0, &stats.s45, &stats.s90, &stats.s135}) {
    CHECK(s->mu == doctest::Approx(0.37));
    CHECK(s->sigma == doctest::Approx(0.0));
  }

  // grid value |dx| + |dy|: S0 values are {10,...,1,0,1,...,10}
  for (auto& e : grid) e.mr = std::abs(e.dx) + std::abs(e.dy);
  stats = eval::direction_metrics(grid);
  double mu = 0.0;
  for (int k = -10; k <= 10; ++k) mu += std::abs(k);
  mu /= 21.0;
  CHECK(stats.s0.mu == doctest::Approx(110.0 / 21.0));
  CHECK(stats.s0.mu == doctest::Approx(mu));
  double var = 0.0;
  for (int k = -10; k <= 10; ++k) var += (std::abs(k) - mu) * (std::abs(k) - mu);
  CHECK(stats.s0.sigma == doctest::Approx(std::sqrt(var / 21.0)));
  // S45 and S135 see |dx|+|dy| = 2|k|
  CHECK(stats.s45.mu == doctest::Approx(2.0 * mu));
  CHECK(stats.s135.mu == doctest::Approx(2.0 * mu));

  // missing mode is named
  grid.erase(std::remove_if(grid.begin(), grid.end(),
                            [](const eval::GridEntry& e) {
                              return e.dx == 3 && e.dy == 3;
                            }),
             grid.end());
  try {
    eval::direction_metrics(grid);
    FAIL("expected missing-mode error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("(3,3)") != std::string::npos);
  }
}

TEST_CASE("direction_metrics agrees with a one-line oracle on random grids") {
  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    std::map<std::pair<int, int>, double> values;
    std::vector<eval::GridEntry> grid;
    for (const auto& [dx, dy] : eval::direction_grid()) {
      const double v = rng.uniform(0.0, 1.0);
      values[{dx, dy}] = v;
      grid.push_back({dx, dy, v});
    }
    const auto stats = eval::direction_metrics(grid);
    auto oracle = [&](auto mode_of) {
      double mu = 0.0;
      for (int k = -10; k <= 10; ++k) mu += values[mode_of(k)];
      mu /= 21.0;
      double var = 0.0;
      for (int k = -10; k <= 10; ++k) {
        var += (values[mode_of(k)] - mu) * (values[mode_of(k)] - mu);
      }
      return eval::DirectionStat{mu, std::sqrt(var / 21.0)};
    };
    const auto s45 = oracle([](int k) { return std::pair{k, k}; });
    CHECK(stats.s45.mu == doctest::Approx(s45.mu).epsilon(1e-12));
    CHECK(stats.s45.sigma == doctest::Approx(s45.sigma).epsilon(1e-12));
    const auto s135 = oracle([](int k) { return std::pair{k, -k}; });
    CHECK(stats.s135.sigma == doctest::Approx(s135.sigma).epsilon(1e-12));
  }
}

TEST_CASE("shift_grid_sweep: constant stub detector and origin consistency") {
  synth::SceneConfig scene;
  scene.width = 64;
  scene.height = 48;
  scene.min_objects = 2;
  scene.max_objects = 2;
  scene.min_object_height = 24;
  scene.max_object_height = 32;
  scene.seed = 19;
  const synth::Dataset dataset = synth::generate_dataset(scene, 3);

  // precomputed detections, emitted regardless of mode
  std::map<std::string, std::vector<Detection>> fixed;
  Rng rng(23);
  for (const synth::Frame& frame : dataset.frames) {
    for (const auto& obj : frame.annotation.objects) {
      if (!obj.reference_box) continue;
      if (rng.uniform() < 0.7) {
        fixed[frame.annotation.frame_id].push_back(
            {frame.annotation.frame_id, *obj.reference_box, rng.uniform(0.5, 1.0),
             Modality::reference});
      }
    }
  }
  const eval::FrameDetector stub = [&](const FrameAnnotation& annotation,
                                       const nn::Tensor&, const nn::Tensor&) {
    auto it = fixed.find(annotation.frame_id);
    return it == fixed.end() ? std::vector<Detection>{} : it->second;
  };

  const auto modes = eval::direction_grid();
  const auto sweep = eval::shift_grid_sweep(stub, dataset, modes, 2, 20.0, false);
  CHECK(sweep.grid.size() == 81);
  REQUIRE(sweep.directions.has_value());
  CHECK(sweep.directions->s0.sigma == doctest::Approx(0.0));
  CHECK(sweep.directions->s45.sigma == doctest::Approx(0.0));
  CHECK(sweep.directions->s90.sigma == doctest::Approx(0.0));
  CHECK(sweep.directions->s135.sigma == doctest::Approx(0.0));

  // identity mode equals a direct mr_score of the unshifted dataset
  std::vector<Detection> all;
  for (const auto& [id, dets] : fixed) {
    all.insert(all.end(), dets.begin(), dets.end());
  }
  const auto filtered = annot::reasonable_filter(dataset.annotations(), 20.0, false);
  const auto direct = eval::mr_score(filtered, all, Modality::reference);
  for (const auto& e : sweep.grid) {
    if (e.dx == 0 && e.dy == 0) {
      CHECK(e.mr == doctest::Approx(direct.mr).epsilon(1e-12));
    }
  }

  // failures name the mode
  const eval::FrameDetector bomb = [&](const FrameAnnotation& annotation,
                                       const nn::Tensor& r,
                                       const nn::Tensor& s) -> std::vector<Detection> {
    (void)annotation;
    (void)r;
    (void)s;
    throw std::runtime_error("boom");
  };
  const std::vector<std::pair<int, int>> one_mode = {{2, -1}};
  try {
    eval::shift_grid_sweep(bomb, dataset, one_mode, 1, 20.0, false);
    FAIL("expected sweep failure");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("(2,-1)") != std::string::npos);
  }
}

TEST_CASE("emit_report round trip, empty schema, and CSV row counts") {
  const auto dir = std::filesystem::temp_directory_path();
  const auto json_path = dir / "arcnn_report_test.json";
  const auto csv_path = dir / "arcnn_report_test.csv";

  eval::Report empty;
  eval::emit_report(empty, json_path, eval::ReportFormat::json);
  const eval::Report back_empty = eval::parse_report_json(json_path);
  CHECK_FALSE(back_empty.mr.has_value());
  CHECK(back_empty.grid.empty());
  CHECK_FALSE(back_empty.directions.has_value());

  eval::Report report;
  eval::MrResult mr;
  mr.has_gt = true;
  mr.mr = 0.234;
  mr.curve.points = {{0.0, 1.0}, {0.5, 0.25}};
  mr.curve.thresholds = {0.9, 0.1};
  report.mr = mr;
  for (const auto& [dx, dy] : eval::direction_grid()) {
    report.grid.push_back({dx, dy, 0.1 * std::abs(dx) + 0.05 * std::abs(dy)});
  }
  report.directions = eval::direction_metrics(report.grid);

  eval::emit_report(report, json_path, eval::ReportFormat::json);
  const eval::Report back = eval::parse_report_json(json_path);
  REQUIRE(back.mr.has_value());
  CHECK(back.mr->mr == report.mr->mr);
  REQUIRE(back.grid.size() == report.grid.size());
  for (size_t i = 0; i < back.grid.size(); ++i) {
    CHECK(back.grid[i].dx == report.grid[i].dx);
    CHECK(back.grid[i].mr == report.grid[i].mr);
  }
  REQUIRE(back.directions.has_value());
  CHECK(back.directions->s45.sigma == report.directions->s45.sigma);

  eval::emit_report(report, csv_path, eval::ReportFormat::csv);
  std::ifstream csv(csv_path);
  size_t rows = 0;
  std::string line;
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == report.grid.size() + 1 + 4);  // grid + header + directions

  std::filesystem::remove(json_path);
  std::filesystem::remove(csv_path);
}
