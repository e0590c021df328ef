// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "arcnn/eval.hpp"
#include "arcnn/model.hpp"
#include "arcnn/synth.hpp"
#include "arcnn/train.hpp"

namespace arcnn::cli {

inline constexpr const char* kToolVersion = "arcnn/0.1.0";
inline constexpr const char* kManifestSchema = "arcnn-manifest/1";
inline constexpr uint64_t kParamsSeedStream = 0x9a2a85ull;  // model init stream

/// Full configuration of a training run; serialized as one JSON document.
struct RunConfig {
  synth::SceneConfig scene;
  int train_frames = 160;
  int eval_frames = 40;
  model::ModelConfig model_config;
  train::TrainConfig train_config;
  uint64_t seed = 1;
};

RunConfig load_run_config(const std::filesystem::path& path);
std::string canonical_config_json(const RunConfig& config);
void save_run_config(const std::filesystem::path& path, const RunConfig& config);

/// Flag overrides applied on top of the config file.
struct Overrides {
  std::optional<uint64_t> seed;
  std::optional<bool> enable_rfa;
  std::optional<bool> enable_jitter;
  std::optional<model::FusionMode> fusion;
};
RunConfig apply_overrides(RunConfig config, const Overrides& overrides);

/// Parallelism bound for sweeps (ARCNN_THREADS, else hardware concurrency).
int sweep_threads();

int cmd_validate(const std::filesystem::path& annotations_path, std::ostream& out,
                 std::ostream& err);

int cmd_stats(const std::filesystem::path& annotations_path,
              const std::optional<std::filesystem::path>& out_dir, std::ostream& out,
              std::ostream& err);

int cmd_train(const std::filesystem::path& config_path,
              const std::filesystem::path& out_dir, const Overrides& overrides,
              std::ostream& out, std::ostream& err);

struct EvalArgs {
  std::optional<std::filesystem::path> checkpoint;
  std::filesystem::path dataset_dir;
  std::filesystem::path out_dir;
  annot::Modality modality = annot::Modality::reference;
  std::optional<std::filesystem::path> detections_file;
  eval::ReportFormat format = eval::ReportFormat::json;
  bool enable_rfa = true;
  model::FusionMode fusion = model::FusionMode::confidence_aware;
  uint64_t seed = 0;
  double min_height = 55.0;  // reasonable-setup threshold
  bool allow_occluded = false;
};
int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err);

struct SweepArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path dataset_dir;
  std::filesystem::path out_dir;
  std::string grid_spec = "full";  // full | directions | custom:FILE
  eval::ReportFormat format = eval::ReportFormat::json;
  bool enable_rfa = true;
  model::FusionMode fusion = model::FusionMode::confidence_aware;
  uint64_t seed = 0;
  double min_height = 55.0;
  bool allow_occluded = false;
};
int cmd_sweep(const SweepArgs& args, std::ostream& out, std::ostream& err);

}  // namespace arcnn::cli
