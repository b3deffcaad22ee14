// SPDX-License-Identifier: Apache-2.0
#include "lgfd/parameter.hpp"

#include "lgfd/error.hpp"

namespace lgfd {

void ParameterSet::check_unique(const std::string& name) const {
  if (find(name)) throw ConfigError("duplicate parameter name '" + name + "'");
}

Tensor& ParameterSet::add(std::string name, Tensor tensor) {
  check_unique(name);
  tensor.set_requires_grad(true);
  params_.push_back({std::move(name), std::move(tensor)});
  return params_.back().tensor;
}

Tensor& ParameterSet::add_buffer(std::string name, Tensor tensor) {
  check_unique(name);
  tensor.set_requires_grad(false);
  buffers_.push_back({std::move(name), std::move(tensor)});
  return buffers_.back().tensor;
}

std::vector<Parameter> ParameterSet::all() const {
  std::vector<Parameter> out = params_;
  out.insert(out.end(), buffers_.begin(), buffers_.end());
  return out;
}

const Parameter* ParameterSet::find(const std::string& name) const {
  for (const auto* list : {&params_, &buffers_})
    for (const auto& p : *list)
      if (p.name == name) return &p;
  return nullptr;
}

std::int64_t ParameterSet::scalar_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

void zero_grad(std::vector<Parameter>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

Sgd::Sgd(std::vector<Parameter> params, double lr, double momentum)
    : params_(std::move(params)), lr_(lr), momentum_(momentum) {
  if (!(lr >= 0.0)) throw ConfigError("train.lr must be non-negative");
  velocity_.reserve(params_.size());
  for (const auto& p : params_) velocity_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
}

void Sgd::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& t = params_[i].tensor;
    if (!t.has_grad()) continue;
    auto data = t.data();
    auto grad = t.grad();
    auto& v = velocity_[i];
    for (std::size_t k = 0; k < v.size(); ++k) {
      v[k] = momentum_ * v[k] + grad[k];
      data[k] -= lr_ * v[k];
    }
  }
}

void Sgd::zero_grad() { lgfd::zero_grad(params_); }

void sgd_step(std::vector<Parameter>& params, double lr) {
  for (auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    auto data = p.tensor.data();
    auto grad = p.tensor.grad();
    for (std::size_t k = 0; k < data.size(); ++k) data[k] -= lr * grad[k];
  }
}

}  // namespace lgfd
