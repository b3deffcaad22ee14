// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "lgfd/tensor.hpp"

namespace lgfd {

struct Parameter {
  std::string name;  // e.g. "fpn.p3.smooth.weight"
  Tensor tensor;
};

/// Ordered registry of named tensors. Trainable parameters take gradients;
/// buffers (batch-norm running statistics) are state that is checkpointed but
/// never optimized.
class ParameterSet {
 public:
  /// Registers a trainable tensor; throws ConfigError on a duplicate name.
  Tensor& add(std::string name, Tensor tensor);
  Tensor& add_buffer(std::string name, Tensor tensor);

  const std::vector<Parameter>& params() const { return params_; }
  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& buffers() const { return buffers_; }
  std::vector<Parameter>& buffers() { return buffers_; }

  /// Trainable parameters followed by buffers.
  std::vector<Parameter> all() const;
  const Parameter* find(const std::string& name) const;
  std::int64_t scalar_count() const;

 private:
  void check_unique(const std::string& name) const;
  std::vector<Parameter> params_;
  std::vector<Parameter> buffers_;
};

void zero_grad(std::vector<Parameter>& params);

/// SGD with classical momentum: v = momentum * v + g; p -= lr * v.
class Sgd {
 public:
  Sgd(std::vector<Parameter> params, double lr, double momentum);
  void step();
  void zero_grad();
  double lr() const { return lr_; }

 private:
  std::vector<Parameter> params_;
  std::vector<std::vector<double>> velocity_;
  double lr_;
  double momentum_;
};

/// One plain update without optimizer state.
void sgd_step(std::vector<Parameter>& params, double lr);

}  // namespace lgfd
