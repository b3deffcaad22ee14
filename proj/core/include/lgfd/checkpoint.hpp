// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "lgfd/parameter.hpp"

namespace lgfd {

/// Checkpoint file layout:
///
///   lgfd-checkpoint 1
///   config <one line of the run configuration>      (repeated)
///   param <name> <d0>x<d1>x... <byte offset>         (trainable)
///   buffer <name> <d0>x<d1>x... <byte offset>        (running statistics)
///   data <byte count>
///   <little-endian IEEE-754 doubles>
///
/// Offsets are relative to the first byte after the `data` line.
struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::uint64_t offset = 0;
  bool buffer = false;
  std::vector<double> values;
};

struct Checkpoint {
  std::string config_text;
  std::vector<CheckpointEntry> entries;
};

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params, const std::string& config_text);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies checkpoint values into `params`. Every registered tensor must be
/// present with an identical shape.
void load_into(const Checkpoint& ckpt, ParameterSet& params);

}  // namespace lgfd
