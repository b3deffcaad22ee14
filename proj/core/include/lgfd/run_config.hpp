// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "lgfd/data.hpp"
#include "lgfd/eval.hpp"
#include "lgfd/losses.hpp"
#include "lgfd/model.hpp"

namespace lgfd {

struct TrainConfig {
  int epochs = 60;
  int batch_size = 16;
  double lr = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 42;
  int eval_every = 0;  // 0: evaluate only after the last epoch
  int seeds = 5;       // runs per ablation arm
  void validate() const;
};

/// Everything a run depends on. `model.image_size` and `model.num_classes`
/// follow the data section and are not separate keys.
struct RunConfig {
  SceneSpec data = SceneSpec::defaults();
  int train_count = 1000;
  int eval_count = 200;
  ModelConfig model;
  LossConfig loss;
  TrainConfig train;
  EvalConfig eval;

  /// Copies data.image_size / category count into model and validates all sections.
  void resolve();
  /// Synthetic eval images start at this scene index so they never overlap training.
  static constexpr std::int64_t kEvalIndexOffset = 1'000'000;
};

/// Sections [data] [model] [loss] [train] [eval]. Missing keys keep their
/// defaults; unknown sections or keys throw ConfigError naming them.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
/// Canonical form: fixed key order, every key present, shortest round-trip numbers.
std::string serialize_run_config(const RunConfig& config);

/// Shortest decimal that parses back to exactly `v`.
std::string format_double(double v);

}  // namespace lgfd
