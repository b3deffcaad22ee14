// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace lgfd {

/// Invalid configuration value or incompatible settings. The message names the
/// offending key or dimension.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Tensor shape contract violated by an operation's inputs.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed or missing input data (annotation files, images, checkpoints).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training stopped because the loss became non-finite.
class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(int epoch, int batch, const std::string& what)
      : std::runtime_error(what), epoch_(epoch), batch_(batch) {}
  int epoch() const noexcept { return epoch_; }
  int batch() const noexcept { return batch_; }

 private:
  int epoch_;
  int batch_;
};

}  // namespace lgfd
