// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver: validate / stats / train / eval / sweep.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "arcnn/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Weakly-aligned two-modality detection harness"};
  app.require_subcommand(1);

  std::string annotations;
  auto* validate = app.add_subcommand("validate", "Check an annotation file");
  validate->add_option("annotations", annotations, "Annotation JSON path")->required();

  std::string stats_annotations;
  std::string stats_out;
  auto* stats = app.add_subcommand("stats", "Shift statistics of an annotation file");
  stats->add_option("annotations", stats_annotations, "Annotation JSON path")->required();
  stats->add_option("--out", stats_out, "Directory for stats.json");

  std::string train_config;
  std::string train_out;
  std::optional<uint64_t> train_seed;
  std::optional<bool> train_rfa;
  std::optional<bool> train_jitter;
  std::string train_fusion;
  auto* train = app.add_subcommand("train", "Generate data and train a detector");
  train->add_option("--config", train_config, "Run config JSON")->required();
  train->add_option("--out", train_out, "Output directory")->required();
  train->add_option("--seed", train_seed, "Override the run seed");
  train->add_option("--enable-rfa", train_rfa, "Enable region feature alignment");
  train->add_option("--enable-jitter", train_jitter, "Enable RoI jitter");
  train->add_option("--fusion", train_fusion, "Fusion mode: caf|naive");

  std::string eval_checkpoint, eval_dataset, eval_out, eval_modality = "reference";
  std::string eval_detections, eval_format = "json", eval_fusion = "caf";
  bool eval_rfa = true;
  uint64_t eval_seed = 0;
  auto* eval_cmd = app.add_subcommand("eval", "Score a detector (or detections) on a dataset");
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "Checkpoint JSON");
  eval_cmd->add_option("--dataset", eval_dataset, "Dataset directory")->required();
  eval_cmd->add_option("--out", eval_out, "Output directory")->required();
  eval_cmd->add_option("--modality", eval_modality, "reference|sensed");
  eval_cmd->add_option("--detections", eval_detections, "Pre-computed detections JSONL");
  eval_cmd->add_option("--format", eval_format, "json|csv");
  eval_cmd->add_option("--enable-rfa", eval_rfa, "Enable region feature alignment");
  eval_cmd->add_option("--fusion", eval_fusion, "Fusion mode: caf|naive");
  eval_cmd->add_option("--seed", eval_seed, "Proposal noise seed");
  double eval_min_height = 55.0;
  bool eval_allow_occluded = false;
  eval_cmd->add_option("--min-height", eval_min_height, "Reasonable-setup height floor (px)");
  eval_cmd->add_option("--allow-occluded", eval_allow_occluded, "Keep occluded objects");

  std::string sweep_checkpoint, sweep_dataset, sweep_out, sweep_grid = "full";
  std::string sweep_format = "json", sweep_fusion = "caf";
  bool sweep_rfa = true;
  uint64_t sweep_seed = 0;
  auto* sweep = app.add_subcommand("sweep", "Position-shift robustness sweep");
  sweep->add_option("--checkpoint", sweep_checkpoint, "Checkpoint JSON")->required();
  sweep->add_option("--dataset", sweep_dataset, "Dataset directory")->required();
  sweep->add_option("--out", sweep_out, "Output directory")->required();
  sweep->add_option("--grid", sweep_grid, "full|directions|custom:FILE");
  sweep->add_option("--format", sweep_format, "json|csv");
  sweep->add_option("--enable-rfa", sweep_rfa, "Enable region feature alignment");
  sweep->add_option("--fusion", sweep_fusion, "Fusion mode: caf|naive");
  sweep->add_option("--seed", sweep_seed, "Proposal noise seed");
  double sweep_min_height = 55.0;
  bool sweep_allow_occluded = false;
  sweep->add_option("--min-height", sweep_min_height, "Reasonable-setup height floor (px)");
  sweep->add_option("--allow-occluded", sweep_allow_occluded, "Keep occluded objects");

  CLI11_PARSE(app, argc, argv);

  try {
    if (validate->parsed()) {
      return arcnn::cli::cmd_validate(annotations, std::cout, std::cerr);
    }
    if (stats->parsed()) {
      std::optional<std::filesystem::path> out_dir;
      if (!stats_out.empty()) out_dir = stats_out;
      return arcnn::cli::cmd_stats(stats_annotations, out_dir, std::cout, std::cerr);
    }
    if (train->parsed()) {
      arcnn::cli::Overrides overrides;
      overrides.seed = train_seed;
      overrides.enable_rfa = train_rfa;
      overrides.enable_jitter = train_jitter;
      if (!train_fusion.empty()) {
        overrides.fusion = arcnn::model::fusion_mode_from_string(train_fusion);
      }
      return arcnn::cli::cmd_train(train_config, train_out, overrides, std::cout,
                                   std::cerr);
    }
    if (eval_cmd->parsed()) {
      arcnn::cli::EvalArgs args;
      if (!eval_checkpoint.empty()) args.checkpoint = eval_checkpoint;
      args.dataset_dir = eval_dataset;
      args.out_dir = eval_out;
      args.modality = arcnn::annot::modality_from_string(eval_modality);
      if (!eval_detections.empty()) args.detections_file = eval_detections;
      args.format = eval_format == "csv" ? arcnn::eval::ReportFormat::csv
                                         : arcnn::eval::ReportFormat::json;
      args.enable_rfa = eval_rfa;
      args.fusion = arcnn::model::fusion_mode_from_string(eval_fusion);
      args.seed = eval_seed;
      args.min_height = eval_min_height;
      args.allow_occluded = eval_allow_occluded;
      return arcnn::cli::cmd_eval(args, std::cout, std::cerr);
    }
    if (sweep->parsed()) {
      arcnn::cli::SweepArgs args;
      args.checkpoint = sweep_checkpoint;
      args.dataset_dir = sweep_dataset;
      args.out_dir = sweep_out;
      args.grid_spec = sweep_grid;
      args.format = sweep_format == "csv" ? arcnn::eval::ReportFormat::csv
                                          : arcnn::eval::ReportFormat::json;
      args.enable_rfa = sweep_rfa;
      args.fusion = arcnn::model::fusion_mode_from_string(sweep_fusion);
      args.seed = sweep_seed;
      args.min_height = sweep_min_height;
      args.allow_occluded = sweep_allow_occluded;
      return arcnn::cli::cmd_sweep(args, std::cout, std::cerr);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
