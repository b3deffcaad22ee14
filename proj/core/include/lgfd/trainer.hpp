// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "lgfd/run_config.hpp"

namespace lgfd {

struct EpochRow {
  int epoch = 0;  // 1-based
  double l_det = 0.0;
  double l_al = 0.0;
  double l_ds = 0.0;
  double total = 0.0;
  std::optional<EvalReport> eval;
};

struct RunRecord {
  std::string config_text;
  std::vector<EpochRow> rows;
  EvalReport initial;  // the untrained model
  EvalReport final_report;
  int best_epoch = 0;
  double best_ap50 = -1.0;
  double wall_time_s = 0.0;  // not written to any file: outputs stay bit-reproducible
};

std::string epoch_row_json(const EpochRow& row);
std::string run_report_json(const RunRecord& record);

struct TrainResult {
  RunRecord record;
  std::unique_ptr<Detector> model;
};

/// Synthetic splits described by the config: training scenes use indices
/// [0, train_count), evaluation scenes start at RunConfig::kEvalIndexOffset.
Dataset make_train_set(const RunConfig& config);
Dataset make_eval_set(const RunConfig& config);

/// The optimization loop. With `run_dir` set, writes metrics.jsonl,
/// report.json, ckpt_last.bin and ckpt_best.bin there. Throws TrainingAborted
/// on a non-finite loss.
TrainResult train(const RunConfig& config, const Dataset& train_set, const Dataset& eval_set,
                  const std::optional<std::filesystem::path>& run_dir = std::nullopt, std::ostream* log = nullptr);

/// Rebuilds a model from a checkpoint and the config embedded in it.
std::unique_ptr<Detector> load_model(const std::filesystem::path& ckpt, RunConfig* config_out = nullptr);

struct Arm {
  std::string name;
  std::string description;
  std::function<void(RunConfig&)> apply;
};

/// Arm set names: components, head_input, levels, alpha_beta, ratio, cbr.
std::vector<std::string> arm_set_names();
std::vector<Arm> all_arms();
/// A comma-separated list of set names and/or arm names, in order, without
/// duplicates. Throws ConfigError listing the valid names on an unknown entry.
std::vector<Arm> resolve_arms(const std::string& spec);

struct ArmSummary {
  std::string name;
  std::string description;
  std::vector<std::uint64_t> seeds;
  std::vector<RunRecord> runs;
  double ap50_mean = 0.0, ap50_std = 0.0;
  double map_mean = 0.0, map_std = 0.0;
  double cosine_mean = 0.0;
  double retrieval_mean = 0.0;
};

struct AblationResult {
  std::vector<ArmSummary> arms;
  std::string to_json() const;
  std::string to_table() const;
};

/// Seeds are train.seed, train.seed + 1, ... (config.train.seeds of them).
/// Runs are independent, so `jobs` > 1 runs them concurrently; results do not
/// depend on `jobs`.
AblationResult ablate(const RunConfig& base, const std::vector<Arm>& arms, int jobs = 1, std::ostream* log = nullptr,
                      const std::optional<std::filesystem::path>& out_dir = std::nullopt);

struct GradCheckComponent {
  std::string name;
  int samples = 0;
  int kink_skips = 0;  // draws rejected because a relu changed sign within +-h
  double max_rel_error = 0.0;
  double max_abs_head_grad = 0.0;  // largest |grad| over detection-head parameters
  bool passed = false;
};

struct GradCheckReport {
  std::vector<GradCheckComponent> components;  // l_det, l_al, l_ds, total
  bool passed = false;
  std::string to_json() const;
};

inline constexpr double kGradCheckStep = 1e-4;
inline constexpr double kGradCheckTolerance = 1e-4;
/// |a - n| / max(|a|, |n|, floor): keeps exact zeros from dividing by zero.
inline constexpr double kGradCheckFloor = 1e-8;

/// Central differences on a tiny model (32x32 images, L = 8, batch 4). The
/// model and data shapes come from these fixed values; `config` supplies the
/// loss settings and seeds. Draws whose +-h probes cross a relu kink are
/// redrawn.
GradCheckReport grad_check(const RunConfig& config, int samples_per_component = 24);

}  // namespace lgfd
