// SPDX-License-Identifier: Apache-2.0
#include "arcnn/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace arcnn::cli {

using nlohmann::json;

namespace {

json scene_to_json(const synth::SceneConfig& s) {
  return {{"width", s.width},
          {"height", s.height},
          {"min_objects", s.min_objects},
          {"max_objects", s.max_objects},
          {"min_object_height", s.min_object_height},
          {"max_object_height", s.max_object_height},
          {"shift_mean", json::array({s.shift_mean_x, s.shift_mean_y})},
          {"shift_std", json::array({s.shift_std_x, s.shift_std_y})},
          {"unpaired_rate", s.unpaired_rate},
          {"day_night_mix", s.day_night_mix}};
}

synth::SceneConfig scene_from_json(const json& j) {
  synth::SceneConfig s;
  s.width = j.value("width", s.width);
  s.height = j.value("height", s.height);
  s.min_objects = j.value("min_objects", s.min_objects);
  s.max_objects = j.value("max_objects", s.max_objects);
  s.min_object_height = j.value("min_object_height", s.min_object_height);
  s.max_object_height = j.value("max_object_height", s.max_object_height);
  if (j.contains("shift_mean")) {
    s.shift_mean_x = j["shift_mean"][0].get<double>();
    s.shift_mean_y = j["shift_mean"][1].get<double>();
  }
  if (j.contains("shift_std")) {
    s.shift_std_x = j["shift_std"][0].get<double>();
    s.shift_std_y = j["shift_std"][1].get<double>();
  }
  s.unpaired_rate = j.value("unpaired_rate", s.unpaired_rate);
  s.day_night_mix = j.value("day_night_mix", s.day_night_mix);
  return s;
}

json model_to_json(const model::ModelConfig& m) {
  return {{"in_channels", m.in_channels},
          {"base_channels", m.base_channels},
          {"feature_channels", m.feature_channels},
          {"pooled_size", m.pooled_size},
          {"samples_per_bin", m.samples_per_bin},
          {"rfa_hidden", m.rfa_hidden},
          {"conf_hidden", m.conf_hidden},
          {"det_hidden", m.det_hidden},
          {"context_factor", m.context_factor}};
}

model::ModelConfig model_from_json(const json& j) {
  model::ModelConfig m;
  m.in_channels = j.value("in_channels", m.in_channels);
  m.base_channels = j.value("base_channels", m.base_channels);
  m.feature_channels = j.value("feature_channels", m.feature_channels);
  m.pooled_size = j.value("pooled_size", m.pooled_size);
  m.samples_per_bin = j.value("samples_per_bin", m.samples_per_bin);
  m.rfa_hidden = j.value("rfa_hidden", m.rfa_hidden);
  m.conf_hidden = j.value("conf_hidden", m.conf_hidden);
  m.det_hidden = j.value("det_hidden", m.det_hidden);
  m.context_factor = j.value("context_factor", m.context_factor);
  return m;
}

json train_to_json(const train::TrainConfig& t) {
  return {{"learning_rate", t.learning_rate},
          {"momentum", t.momentum},
          {"weight_decay", t.weight_decay},
          {"epochs", t.epochs},
          {"lr_decay_epoch", t.lr_decay_epoch},
          {"lr_decay_factor", t.lr_decay_factor},
          {"batch_rois", t.batch_rois},
          {"positive_fraction", t.positive_fraction},
          {"jitter_sigma", json::array({t.jitter_sigma0, t.jitter_sigma1})},
          {"lambda", t.lambda},
          {"enable_rfa", t.enable_rfa},
          {"enable_jitter", t.enable_jitter},
          {"fusion", model::to_string(t.fusion)}};
}

train::TrainConfig train_from_json(const json& j) {
  train::TrainConfig t;
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.momentum = j.value("momentum", t.momentum);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  t.epochs = j.value("epochs", t.epochs);
  t.lr_decay_epoch = j.value("lr_decay_epoch", t.lr_decay_epoch);
  t.lr_decay_factor = j.value("lr_decay_factor", t.lr_decay_factor);
  t.batch_rois = j.value("batch_rois", t.batch_rois);
  t.positive_fraction = j.value("positive_fraction", t.positive_fraction);
  if (j.contains("jitter_sigma")) {
    t.jitter_sigma0 = j["jitter_sigma"][0].get<double>();
    t.jitter_sigma1 = j["jitter_sigma"][1].get<double>();
  }
  t.lambda = j.value("lambda", t.lambda);
  t.enable_rfa = j.value("enable_rfa", t.enable_rfa);
  t.enable_jitter = j.value("enable_jitter", t.enable_jitter);
  if (j.contains("fusion")) t.fusion = model::fusion_mode_from_string(j["fusion"]);
  return t;
}

json config_to_json(const RunConfig& config) {
  return {{"scene", scene_to_json(config.scene)},
          {"dataset", {{"train_frames", config.train_frames},
                       {"eval_frames", config.eval_frames}}},
          {"model", model_to_json(config.model_config)},
          {"train", train_to_json(config.train_config)},
          {"seed", config.seed}};
}

std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void write_manifest(const std::filesystem::path& out_dir, const std::string& command,
                    uint64_t config_hash, uint64_t seed,
                    const std::vector<std::string>& artifacts) {
  json manifest;
  manifest["schema"] = kManifestSchema;
  manifest["command"] = command;
  std::ostringstream hash;
  hash << std::hex << std::setw(16) << std::setfill('0') << config_hash;
  manifest["config_hash"] = hash.str();
  manifest["seed"] = seed;
  manifest["artifact_paths"] = artifacts;
  manifest["tool_version"] = kToolVersion;
  manifest["created_at"] = iso_timestamp();  // the only non-reproducible field
  std::ofstream out(out_dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write manifest in " + out_dir.string());
  out << manifest.dump(2) << "\n";
}

std::vector<std::pair<int, int>> parse_grid_spec(const std::string& spec) {
  if (spec == "full") return eval::full_grid();
  if (spec == "directions") return eval::direction_grid();
  const std::string prefix = "custom:";
  if (spec.rfind(prefix, 0) == 0) {
    const std::filesystem::path path = spec.substr(prefix.size());
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open custom grid file " + path.string());
    json doc = json::parse(in);
    std::vector<std::pair<int, int>> modes;
    for (const json& jm : doc) {
      modes.emplace_back(jm.at(0).get<int>(), jm.at(1).get<int>());
    }
    return modes;
  }
  throw std::runtime_error("unknown grid spec '" + spec +
                           "' (expected full, directions, or custom:FILE)");
}

eval::Detector make_detector(const model::Params& params, bool enable_rfa,
                             model::FusionMode fusion, uint64_t seed) {
  eval::DetectorConfig config;
  config.enable_rfa = enable_rfa;
  config.fusion = fusion;
  config.seed = seed;
  return eval::Detector(params, config);
}

}  // namespace

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
  RunConfig config;
  if (doc.contains("scene")) config.scene = scene_from_json(doc["scene"]);
  if (doc.contains("dataset")) {
    config.train_frames = doc["dataset"].value("train_frames", config.train_frames);
    config.eval_frames = doc["dataset"].value("eval_frames", config.eval_frames);
  }
  if (doc.contains("model")) config.model_config = model_from_json(doc["model"]);
  if (doc.contains("train")) config.train_config = train_from_json(doc["train"]);
  config.seed = doc.value("seed", config.seed);
  return config;
}

std::string canonical_config_json(const RunConfig& config) {
  return config_to_json(config).dump();
}

void save_run_config(const std::filesystem::path& path, const RunConfig& config) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write config " + path.string());
  out << config_to_json(config).dump(2) << "\n";
}

RunConfig apply_overrides(RunConfig config, const Overrides& overrides) {
  if (overrides.seed) config.seed = *overrides.seed;
  if (overrides.enable_rfa) config.train_config.enable_rfa = *overrides.enable_rfa;
  if (overrides.enable_jitter) {
    config.train_config.enable_jitter = *overrides.enable_jitter;
  }
  if (overrides.fusion) config.train_config.fusion = *overrides.fusion;
  // Every stream in the run derives from the single top-level seed.
  config.scene.seed = mix_seed(config.seed, 0x5ce7e5ull);
  config.train_config.seed = mix_seed(config.seed, 0x7217e5ull);
  return config;
}

int sweep_threads() {
  if (const char* env = std::getenv("ARCNN_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) return v;
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc > 0 ? static_cast<int>(hc) : 1;
}

int cmd_validate(const std::filesystem::path& annotations_path, std::ostream& out,
                 std::ostream& err) {
  if (!std::filesystem::exists(annotations_path)) {
    err << "validate: no such file: " << annotations_path.string() << "\n";
    return 2;
  }
  const auto diagnostics = annot::validate_annotation_file(annotations_path);
  for (const annot::Diagnostic& d : diagnostics) {
    err << annotations_path.string() << ": frame '" << d.frame_id << "'";
    if (d.uid >= 0) err << " uid " << d.uid;
    err << ": " << d.message << "\n";
  }
  if (diagnostics.empty()) {
    out << "OK: " << annotations_path.string() << "\n";
    return 0;
  }
  err << diagnostics.size() << " violation(s)\n";
  return 1;
}

int cmd_stats(const std::filesystem::path& annotations_path,
              const std::optional<std::filesystem::path>& out_dir, std::ostream& out,
              std::ostream& err) {
  std::vector<annot::FrameAnnotation> frames;
  try {
    frames = annot::load_annotations(annotations_path);
  } catch (const std::exception& e) {
    err << "stats: " << e.what() << "\n";
    return 1;
  }
  const annot::ShiftStats stats = annot::shift_statistics(frames);
  const size_t total = stats.paired_count + stats.unpaired_count;
  const double unpaired_fraction =
      total == 0 ? 0.0 : static_cast<double>(stats.unpaired_count) / static_cast<double>(total);
  out << "objects: " << total << " (paired " << stats.paired_count << ", unpaired "
      << stats.unpaired_count << ", " << 100.0 * unpaired_fraction << "%)\n";
  out << "shift mean (px): (" << stats.mean_x << ", " << stats.mean_y << ")\n";
  out << "shift std (px):  (" << stats.std_x << ", " << stats.std_y << ")\n";
  out << "shift distance histogram (unit bins):";
  for (size_t c : stats.histogram) out << " " << c;
  out << "\n";
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    json doc = {{"schema", "arcnn-stats/1"},
                {"histogram", stats.histogram},
                {"mean", json::array({stats.mean_x, stats.mean_y})},
                {"std", json::array({stats.std_x, stats.std_y})},
                {"paired", stats.paired_count},
                {"unpaired", stats.unpaired_count},
                {"unpaired_fraction", unpaired_fraction}};
    std::ofstream file(*out_dir / "stats.json");
    file << doc.dump(2) << "\n";
    write_manifest(*out_dir, "stats", fnv1a64(annotations_path.string()), 0,
                   {"stats.json"});
  }
  return 0;
}

int cmd_train(const std::filesystem::path& config_path,
              const std::filesystem::path& out_dir, const Overrides& overrides,
              std::ostream& out, std::ostream& err) {
  try {
    const RunConfig config = apply_overrides(load_run_config(config_path), overrides);
    std::filesystem::create_directories(out_dir);

    const synth::Dataset train_set = synth::generate_dataset(
        config.scene, config.train_frames, 0);
    const synth::Dataset eval_set = synth::generate_dataset(
        config.scene, config.eval_frames, static_cast<uint64_t>(config.train_frames));
    synth::save_dataset(out_dir / "dataset" / "train", train_set);
    synth::save_dataset(out_dir / "dataset" / "eval", eval_set);

    model::Params params =
        model::Params::init(config.model_config, mix_seed(config.seed, kParamsSeedStream));
    const train::TrainResult result =
        train::train(std::move(params), train_set, config.train_config);

    model::save_checkpoint(out_dir / "checkpoint.json", result.params);
    {
      std::ofstream trace(out_dir / "loss_trace.csv");
      trace << "iteration,loss,cls,shift,reg\n";
      for (size_t i = 0; i < result.stats_trace.size(); ++i) {
        const train::StepStats& s = result.stats_trace[i];
        trace << i << "," << std::setprecision(17) << s.loss << "," << s.cls << ","
              << s.shift << "," << s.reg << "\n";
      }
    }
    save_run_config(out_dir / "config.json", config);
    write_manifest(out_dir, "train", fnv1a64(canonical_config_json(config)),
                   config.seed,
                   {"checkpoint.json", "loss_trace.csv", "config.json",
                    "dataset/train", "dataset/eval"});
    out << "trained " << result.loss_trace.size() << " iterations; final loss "
        << (result.loss_trace.empty() ? 0.0 : result.loss_trace.back()) << "\n";
    out << "checkpoint: " << (out_dir / "checkpoint.json").string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    err << "train: " << e.what() << "\n";
    return 1;
  }
}

int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err) {
  try {
    std::filesystem::create_directories(args.out_dir);
    const synth::Dataset dataset = synth::load_dataset(args.dataset_dir);

    std::vector<annot::Detection> detections;
    if (args.detections_file) {
      detections = annot::load_detections(*args.detections_file);
    } else {
      if (!args.checkpoint) {
        err << "eval: either --checkpoint or --detections is required\n";
        return 2;
      }
      const model::Params params = model::load_checkpoint(*args.checkpoint);
      const eval::Detector detector =
          make_detector(params, args.enable_rfa, args.fusion, args.seed);
      for (const synth::Frame& frame : dataset.frames) {
        auto dets = detector.detect(frame);
        detections.insert(detections.end(), dets.begin(), dets.end());
      }
      annot::save_detections(args.out_dir / "detections.jsonl", detections);
    }

    const auto filtered = annot::reasonable_filter(dataset.annotations(), args.min_height, args.allow_occluded);
    const eval::MrResult mr = eval::mr_score(filtered, detections, args.modality);

    eval::Report report;
    report.mr = mr;
    const std::string report_name =
        args.format == eval::ReportFormat::json ? "report.json" : "report.csv";
    eval::emit_report(report, args.out_dir / "report.json", eval::ReportFormat::json);
    if (args.format == eval::ReportFormat::csv) {
      eval::emit_report(report, args.out_dir / "report.csv", eval::ReportFormat::csv);
    }
    std::vector<std::string> artifacts = {"report.json"};
    if (args.format == eval::ReportFormat::csv) artifacts.push_back("report.csv");
    if (!args.detections_file) artifacts.push_back("detections.jsonl");
    write_manifest(args.out_dir, "eval",
                   fnv1a64(args.dataset_dir.string() + report_name), args.seed,
                   artifacts);
    if (mr.has_gt) {
      out << "MR (" << annot::to_string(args.modality) << "): " << mr.mr << "\n";
    } else {
      out << "MR (" << annot::to_string(args.modality) << "): no-gt\n";
    }
    return 0;
  } catch (const std::exception& e) {
    err << "eval: " << e.what() << "\n";
    return 1;
  }
}

int cmd_sweep(const SweepArgs& args, std::ostream& out, std::ostream& err) {
  try {
    std::filesystem::create_directories(args.out_dir);
    const synth::Dataset dataset = synth::load_dataset(args.dataset_dir);
    const model::Params params = model::load_checkpoint(args.checkpoint);
    const eval::Detector detector =
        make_detector(params, args.enable_rfa, args.fusion, args.seed);
    const auto shifts = parse_grid_spec(args.grid_spec);

    const eval::SweepResult sweep = eval::shift_grid_sweep(
        detector.as_frame_detector(), dataset, shifts, sweep_threads(),
        args.min_height, args.allow_occluded);

    eval::Report report;
    report.grid = sweep.grid;
    report.directions = sweep.directions;
    eval::emit_report(report, args.out_dir / "report.json", eval::ReportFormat::json);
    if (args.format == eval::ReportFormat::csv) {
      eval::emit_report(report, args.out_dir / "report.csv", eval::ReportFormat::csv);
    }
    std::vector<std::string> artifacts = {"report.json"};
    if (args.format == eval::ReportFormat::csv) artifacts.push_back("report.csv");
    write_manifest(args.out_dir, "sweep", fnv1a64(args.grid_spec), args.seed,
                   artifacts);

    out << "sweep: " << sweep.grid.size() << " modes\n";
    for (const eval::GridEntry& e : sweep.grid) {
      if (e.dx == 0 && e.dy == 0) {
        out << "origin MR: " << e.mr << "\n";
        break;
      }
    }
    if (sweep.directions) {
      const eval::DirectionStats& d = *sweep.directions;
      out << "S0:   mu " << d.s0.mu << " sigma " << d.s0.sigma << "\n";
      out << "S45:  mu " << d.s45.mu << " sigma " << d.s45.sigma << "\n";
      out << "S90:  mu " << d.s90.mu << " sigma " << d.s90.sigma << "\n";
      out << "S135: mu " << d.s135.mu << " sigma " << d.s135.sigma << "\n";
    }
    return 0;
  } catch (const std::exception& e) {
    err << "sweep: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace arcnn::cli
