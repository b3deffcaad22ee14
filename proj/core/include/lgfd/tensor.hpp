// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace lgfd {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;
using BackwardFn = std::function<void(TensorImpl& self)>;

/// Storage and tape node. `backward` reads `self.grad` and accumulates into
/// the gradients of `inputs`; it is only set on nodes created by an operation
/// while gradient recording is enabled.
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;

  bool is_leaf() const { return !backward; }
  /// Allocates a zero gradient buffer if none exists and returns it.
  std::vector<double>& ensure_grad();
};

/// Dense row-major tensor of doubles with reverse-mode gradient tracking.
/// Copies share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t dim(int axis) const;
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  double item() const;
  double at(std::int64_t flat) const { return impl_->data[static_cast<std::size_t>(flat)]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<double> grad() { return impl_->grad; }
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad();

  /// Same values, no tape history, no gradient tracking.
  Tensor detach() const;
  Tensor clone() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Thread-local switch for tape recording. Operations executed while disabled
/// produce tensors without history.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Builds the result node of an operation. Records `backward` only when
/// recording is enabled and at least one input requires a gradient.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs, BackwardFn backward);

/// Gradient slot of the i-th input of `self`, or nullptr if that input does
/// not take a gradient.
std::vector<double>* input_grad(TensorImpl& self, std::size_t i);

/// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls;
/// interior gradients are recomputed each call.
void backward(const Tensor& loss);

}  // namespace lgfd
