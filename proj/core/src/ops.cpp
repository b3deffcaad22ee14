// SPDX-License-Identifier: Apache-2.0
#include "lgfd/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "lgfd/error.hpp"

namespace lgfd {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using Vec = std::vector<double>;

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void require_ndim(const Tensor& t, int n, const char* op, const char* name) {
  require(t.ndim() == n, std::string(op) + ": " + name + " must be " + std::to_string(n) + "-D, got " + shape_str(t.shape()));
}

const Vec& in_data(const TensorImpl& self, std::size_t i) { return self.inputs[i]->data; }

void accumulate(Vec& dst, const Vec& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

Vec copy_data(const Tensor& t) { return Vec(t.data().begin(), t.data().end()); }

struct ConvGeom {
  std::int64_t batch, channels, height, width, out_channels, kernel, out_h, out_w;
  int stride, padding;
  std::int64_t col_rows() const { return channels * kernel * kernel; }
  std::int64_t col_cols() const { return out_h * out_w; }
  bool pointwise() const { return kernel == 1 && stride == 1 && padding == 0; }
};

void im2col(const double* x, const ConvGeom& g, double* col) {
  const std::int64_t k = g.kernel;
  for (std::int64_t c = 0; c < g.channels; ++c) {
    const double* xc = x + c * g.height * g.width;
    for (std::int64_t ki = 0; ki < k; ++ki) {
      for (std::int64_t kj = 0; kj < k; ++kj) {
        double* row = col + ((c * k + ki) * k + kj) * g.col_cols();
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t iy = oy * g.stride - g.padding + ki;
          double* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = xc + iy * g.width;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t ix = ox * g.stride - g.padding + kj;
            dst[ox] = (ix >= 0 && ix < g.width) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvGeom& g, double* x) {
  const std::int64_t k = g.kernel;
  for (std::int64_t c = 0; c < g.channels; ++c) {
    double* xc = x + c * g.height * g.width;
    for (std::int64_t ki = 0; ki < k; ++ki) {
      for (std::int64_t kj = 0; kj < k; ++kj) {
        const double* row = col + ((c * k + ki) * k + kj) * g.col_cols();
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t iy = oy * g.stride - g.padding + ki;
          if (iy < 0 || iy >= g.height) continue;
          const double* src = row + oy * g.out_w;
          double* dst = xc + iy * g.width;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t ix = ox * g.stride - g.padding + kj;
            if (ix >= 0 && ix < g.width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  Vec out = copy_data(a);
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorImpl& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (auto* g = input_grad(self, k)) accumulate(*g, self.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  Vec out = copy_data(a);
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorImpl& self) {
    if (auto* g = input_grad(self, 0)) accumulate(*g, self.grad);
    if (auto* g = input_grad(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  Vec out = copy_data(a);
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorImpl& self) {
    if (auto* g = input_grad(self, 0)) {
      const Vec& other = in_data(self, 1);
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * other[i];
    }
    if (auto* g = input_grad(self, 1)) {
      const Vec& other = in_data(self, 0);
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * other[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  Vec out = copy_data(a);
  for (auto& v : out) v *= s;
  return make_result(a.shape(), std::move(out), {a}, [s](TensorImpl& self) {
    if (auto* g = input_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * self.grad[i];
  });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return make_result({}, {total}, {a}, [](TensorImpl& self) {
    if (auto* g = input_grad(self, 0))
      for (auto& v : *g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor abs(const Tensor& a) {
  Vec out = copy_data(a);
  for (auto& v : out) v = std::fabs(v);
  return make_result(a.shape(), std::move(out), {a}, [](TensorImpl& self) {
    if (auto* g = input_grad(self, 0)) {
      const Vec& x = in_data(self, 0);
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += (x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0)) * self.grad[i];
    }
  });
}

namespace {
thread_local ReluSignRecorder* g_sign_recorder = nullptr;
}

ReluSignRecorder::ReluSignRecorder() : previous_(g_sign_recorder) { g_sign_recorder = this; }
ReluSignRecorder::~ReluSignRecorder() { g_sign_recorder = previous_; }

void ReluSignRecorder::record(std::span<const double> x) {
  for (double v : x) {
    hash_ = (hash_ ^ (v > 0.0 ? 0x9dULL : 0x3bULL)) * 0x100000001b3ULL;
    ++count_;
  }
}

Tensor relu(const Tensor& a) {
  if (g_sign_recorder) g_sign_recorder->record(a.data());
  Vec out = copy_data(a);
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  return make_result(a.shape(), std::move(out), {a}, [](TensorImpl& self) {
    if (auto* g = input_grad(self, 0)) {
      const Vec& x = in_data(self, 0);
      for (std::size_t i = 0; i < g->size(); ++i)
        if (x[i] > 0.0) (*g)[i] += self.grad[i];
    }
  });
}

Tensor sigmoid(const Tensor& a) {
  Vec out = copy_data(a);
  for (auto& v : out) v = 1.0 / (1.0 + std::exp(-v));
  return make_result(a.shape(), std::move(out), {a}, [](TensorImpl& self) {
    if (auto* g = input_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) {
        const double y = self.data[i];
        (*g)[i] += self.grad[i] * y * (1.0 - y);
      }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_numel(shape) == a.numel(), "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  return make_result(std::move(shape), copy_data(a), {a}, [](TensorImpl& self) {
    if (auto* g = input_grad(self, 0)) accumulate(*g, self.grad);
  });
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding) {
  require_ndim(input, 4, "conv2d", "input");
  require_ndim(weight, 4, "conv2d", "weight");
  require(stride >= 1 && padding >= 0, "conv2d: stride must be >= 1 and padding >= 0");
  ConvGeom g{};
  g.batch = input.dim(0);
  g.channels = input.dim(1);
  g.height = input.dim(2);
  g.width = input.dim(3);
  g.out_channels = weight.dim(0);
  g.kernel = weight.dim(2);
  g.stride = stride;
  g.padding = padding;
  require(weight.dim(1) == g.channels, "conv2d: input has " + std::to_string(g.channels) + " channels but weight " +
                                           shape_str(weight.shape()) + " expects " + std::to_string(weight.dim(1)));
  require(weight.dim(3) == g.kernel, "conv2d: kernel must be square, got " + shape_str(weight.shape()));
  require(g.kernel == 1 || g.kernel == 3, "conv2d: kernel size must be 1 or 3, got " + std::to_string(g.kernel));
  require(!bias.defined() || (bias.ndim() == 1 && bias.dim(0) == g.out_channels),
          "conv2d: bias must have " + std::to_string(g.out_channels) + " entries");
  const std::int64_t span_h = g.height + 2 * padding - g.kernel;
  const std::int64_t span_w = g.width + 2 * padding - g.kernel;
  require(span_h >= 0, "conv2d: height " + std::to_string(g.height) + " too small for kernel " + std::to_string(g.kernel));
  require(span_w >= 0, "conv2d: width " + std::to_string(g.width) + " too small for kernel " + std::to_string(g.kernel));
  g.out_h = span_h / stride + 1;
  g.out_w = span_w / stride + 1;

  const std::int64_t in_plane = g.channels * g.height * g.width;
  const std::int64_t out_plane = g.out_channels * g.col_cols();
  Vec out(static_cast<std::size_t>(g.batch * out_plane));
  Vec col(g.pointwise() ? 0 : static_cast<std::size_t>(g.col_rows() * g.col_cols()));
  ConstMatMap w(weight.data().data(), g.out_channels, g.col_rows());
  for (std::int64_t b = 0; b < g.batch; ++b) {
    const double* xb = input.data().data() + b * in_plane;
    const double* cp = xb;
    if (!g.pointwise()) {
      im2col(xb, g, col.data());
      cp = col.data();
    }
    ConstMatMap cm(cp, g.col_rows(), g.col_cols());
    MatMap y(out.data() + b * out_plane, g.out_channels, g.col_cols());
    y.noalias() = w * cm;
    if (bias.defined()) {
      auto bd = bias.data();
      for (std::int64_t o = 0; o < g.out_channels; ++o) y.row(o).array() += bd[static_cast<std::size_t>(o)];
    }
  }

  Shape out_shape{g.batch, g.out_channels, g.out_h, g.out_w};
  return make_result(std::move(out_shape), std::move(out), {input, weight, bias}, [g](TensorImpl& self) {
    Vec* gx = input_grad(self, 0);
    Vec* gw = input_grad(self, 1);
    Vec* gb = self.inputs[2] ? input_grad(self, 2) : nullptr;
    const Vec& x = in_data(self, 0);
    const Vec& wd = in_data(self, 1);
    const std::int64_t in_plane = g.channels * g.height * g.width;
    const std::int64_t out_plane = g.out_channels * g.col_cols();
    Vec col(g.pointwise() ? 0 : static_cast<std::size_t>(g.col_rows() * g.col_cols()));
    Vec dcol(gx && !g.pointwise() ? static_cast<std::size_t>(g.col_rows() * g.col_cols()) : 0);
    ConstMatMap w(wd.data(), g.out_channels, g.col_rows());
    for (std::int64_t b = 0; b < g.batch; ++b) {
      ConstMatMap dy(self.grad.data() + b * out_plane, g.out_channels, g.col_cols());
      if (gw) {
        const double* cp = x.data() + b * in_plane;
        if (!g.pointwise()) {
          im2col(cp, g, col.data());
          cp = col.data();
        }
        ConstMatMap cm(cp, g.col_rows(), g.col_cols());
        MatMap dw(gw->data(), g.out_channels, g.col_rows());
        dw.noalias() += dy * cm.transpose();
      }
      if (gb)
        for (std::int64_t o = 0; o < g.out_channels; ++o) {
          const double* row = dy.data() + o * g.col_cols();
          double s = 0.0;
          for (std::int64_t k = 0; k < g.col_cols(); ++k) s += row[k];
          (*gb)[static_cast<std::size_t>(o)] += s;
        }
      if (gx) {
        if (g.pointwise()) {
          MatMap dx(gx->data() + b * in_plane, g.channels, g.col_cols());
          dx.noalias() += w.transpose() * dy;
        } else {
          MatMap dc(dcol.data(), g.col_rows(), g.col_cols());
          dc.noalias() = w.transpose() * dy;
          col2im_add(dcol.data(), g, gx->data() + b * in_plane);
        }
      }
    }
  });
}

BatchNormState BatchNormState::init(std::int64_t channels) {
  return {Tensor::zeros({channels}), Tensor::full({channels}, 1.0)};
}

Tensor batch_norm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta, BatchNormState& state, NormMode mode,
                    double eps, double momentum) {
  require_ndim(input, 4, "batch_norm2d", "input");
  const std::int64_t B = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  require(gamma.numel() == C && beta.numel() == C, "batch_norm2d: gamma/beta must have " + std::to_string(C) + " entries");
  require(state.running_mean.numel() == C && state.running_var.numel() == C,
          "batch_norm2d: running state must have " + std::to_string(C) + " entries");
  const std::int64_t count = B * HW;
  if (mode == NormMode::kTrain && count < 2)
    throw ShapeError("batch_norm2d: train mode needs at least 2 values per channel, got " + std::to_string(count));

  const auto x = input.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  Vec out(x.size());
  Vec xhat(x.size());
  Vec inv_std(static_cast<std::size_t>(C));
  for (std::int64_t c = 0; c < C; ++c) {
    double mu, var;
    if (mode == NormMode::kTrain) {
      double s = 0.0;
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < HW; ++i) s += x[static_cast<std::size_t>((b * C + c) * HW + i)];
      mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < HW; ++i) {
          const double d = x[static_cast<std::size_t>((b * C + c) * HW + i)] - mu;
          ss += d * d;
        }
      var = ss / static_cast<double>(count);
      auto rm = state.running_mean.data();
      auto rv = state.running_var.data();
      const double unbiased = ss / static_cast<double>(count - 1);
      rm[static_cast<std::size_t>(c)] = (1.0 - momentum) * rm[static_cast<std::size_t>(c)] + momentum * mu;
      rv[static_cast<std::size_t>(c)] = (1.0 - momentum) * rv[static_cast<std::size_t>(c)] + momentum * unbiased;
    } else {
      mu = state.running_mean.data()[static_cast<std::size_t>(c)];
      var = state.running_var.data()[static_cast<std::size_t>(c)];
    }
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(c)] = is;
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t i = 0; i < HW; ++i) {
        const auto k = static_cast<std::size_t>((b * C + c) * HW + i);
        xhat[k] = (x[k] - mu) * is;
        out[k] = gd[static_cast<std::size_t>(c)] * xhat[k] + bd[static_cast<std::size_t>(c)];
      }
  }

  const bool train = mode == NormMode::kTrain;
  return make_result(input.shape(), std::move(out), {input, gamma, beta},
                     [B, C, HW, train, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorImpl& self) {
                       Vec* gx = input_grad(self, 0);
                       Vec* gg = input_grad(self, 1);
                       Vec* gb = input_grad(self, 2);
                       const Vec& gamma = in_data(self, 1);
                       const double n = static_cast<double>(B * HW);
                       for (std::int64_t c = 0; c < C; ++c) {
                         double sum_dy = 0.0, sum_dy_xhat = 0.0;
                         for (std::int64_t b = 0; b < B; ++b)
                           for (std::int64_t i = 0; i < HW; ++i) {
                             const auto k = static_cast<std::size_t>((b * C + c) * HW + i);
                             sum_dy += self.grad[k];
                             sum_dy_xhat += self.grad[k] * xhat[k];
                           }
                         const auto cc = static_cast<std::size_t>(c);
                         if (gg) (*gg)[cc] += sum_dy_xhat;
                         if (gb) (*gb)[cc] += sum_dy;
                         if (!gx) continue;
                         const double scale_c = gamma[cc] * inv_std[cc];
                         for (std::int64_t b = 0; b < B; ++b)
                           for (std::int64_t i = 0; i < HW; ++i) {
                             const auto k = static_cast<std::size_t>((b * C + c) * HW + i);
                             if (train)
                               (*gx)[k] += scale_c * (self.grad[k] - sum_dy / n - xhat[k] * sum_dy_xhat / n);
                             else
                               (*gx)[k] += scale_c * self.grad[k];
                           }
                       }
                     });
}

Tensor adaptive_avg_pool2d(const Tensor& input, int out_size) {
  require_ndim(input, 4, "adaptive_avg_pool2d", "input");
  const std::int64_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::int64_t S = out_size;
  require(S >= 1 && S <= H && S <= W,
          "adaptive_avg_pool2d: output size " + std::to_string(S) + " must be in [1, min(H,W)] for " + shape_str(input.shape()));
  auto bin_lo = [](std::int64_t i, std::int64_t n, std::int64_t s) { return (i * n) / s; };
  auto bin_hi = [](std::int64_t i, std::int64_t n, std::int64_t s) { return ((i + 1) * n + s - 1) / s; };
  Vec out(static_cast<std::size_t>(B * C * S * S));
  const auto x = input.data();
  for (std::int64_t p = 0; p < B * C; ++p)
    for (std::int64_t i = 0; i < S; ++i)
      for (std::int64_t j = 0; j < S; ++j) {
        const std::int64_t y0 = bin_lo(i, H, S), y1 = bin_hi(i, H, S);
        const std::int64_t x0 = bin_lo(j, W, S), x1 = bin_hi(j, W, S);
        double s = 0.0;
        for (std::int64_t y = y0; y < y1; ++y)
          for (std::int64_t xx = x0; xx < x1; ++xx) s += x[static_cast<std::size_t>((p * H + y) * W + xx)];
        out[static_cast<std::size_t>((p * S + i) * S + j)] = s / static_cast<double>((y1 - y0) * (x1 - x0));
      }
  return make_result({B, C, S, S}, std::move(out), {input}, [B, C, H, W, S, bin_lo, bin_hi](TensorImpl& self) {
    Vec* g = input_grad(self, 0);
    if (!g) return;
    for (std::int64_t p = 0; p < B * C; ++p)
      for (std::int64_t i = 0; i < S; ++i)
        for (std::int64_t j = 0; j < S; ++j) {
          const std::int64_t y0 = bin_lo(i, H, S), y1 = bin_hi(i, H, S);
          const std::int64_t x0 = bin_lo(j, W, S), x1 = bin_hi(j, W, S);
          const double share =
              self.grad[static_cast<std::size_t>((p * S + i) * S + j)] / static_cast<double>((y1 - y0) * (x1 - x0));
          for (std::int64_t y = y0; y < y1; ++y)
            for (std::int64_t xx = x0; xx < x1; ++xx) (*g)[static_cast<std::size_t>((p * H + y) * W + xx)] += share;
        }
  });
}

Tensor global_avg_pool(const Tensor& input) {
  require_ndim(input, 4, "global_avg_pool", "input");
  const std::int64_t B = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  Vec out(static_cast<std::size_t>(B * C));
  const auto x = input.data();
  for (std::int64_t p = 0; p < B * C; ++p) {
    double s = 0.0;
    for (std::int64_t i = 0; i < HW; ++i) s += x[static_cast<std::size_t>(p * HW + i)];
    out[static_cast<std::size_t>(p)] = s / static_cast<double>(HW);
  }
  return make_result({B, C}, std::move(out), {input}, [B, C, HW](TensorImpl& self) {
    Vec* g = input_grad(self, 0);
    if (!g) return;
    for (std::int64_t p = 0; p < B * C; ++p) {
      const double share = self.grad[static_cast<std::size_t>(p)] / static_cast<double>(HW);
      for (std::int64_t i = 0; i < HW; ++i) (*g)[static_cast<std::size_t>(p * HW + i)] += share;
    }
  });
}

Tensor upsample_nearest2x(const Tensor& input) {
  require_ndim(input, 4, "upsample_nearest2x", "input");
  const std::int64_t P = input.dim(0) * input.dim(1), H = input.dim(2), W = input.dim(3);
  Vec out(static_cast<std::size_t>(P * 4 * H * W));
  const auto x = input.data();
  for (std::int64_t p = 0; p < P; ++p)
    for (std::int64_t y = 0; y < 2 * H; ++y)
      for (std::int64_t xx = 0; xx < 2 * W; ++xx)
        out[static_cast<std::size_t>((p * 2 * H + y) * 2 * W + xx)] = x[static_cast<std::size_t>((p * H + y / 2) * W + xx / 2)];
  return make_result({input.dim(0), input.dim(1), 2 * H, 2 * W}, std::move(out), {input}, [P, H, W](TensorImpl& self) {
    Vec* g = input_grad(self, 0);
    if (!g) return;
    for (std::int64_t p = 0; p < P; ++p)
      for (std::int64_t y = 0; y < 2 * H; ++y)
        for (std::int64_t xx = 0; xx < 2 * W; ++xx)
          (*g)[static_cast<std::size_t>((p * H + y / 2) * W + xx / 2)] += self.grad[static_cast<std::size_t>((p * 2 * H + y) * 2 * W + xx)];
  });
}

namespace {

Tensor channel_slice(const Tensor& input, std::int64_t begin, std::int64_t end) {
  const std::int64_t B = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  const std::int64_t n = end - begin;
  Vec out(static_cast<std::size_t>(B * n * HW));
  const auto x = input.data();
  for (std::int64_t b = 0; b < B; ++b)
    std::copy_n(x.begin() + (b * C + begin) * HW, n * HW, out.begin() + b * n * HW);
  return make_result({B, n, input.dim(2), input.dim(3)}, std::move(out), {input}, [B, C, HW, begin, n](TensorImpl& self) {
    Vec* g = input_grad(self, 0);
    if (!g) return;
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t i = 0; i < n * HW; ++i)
        (*g)[static_cast<std::size_t>((b * C + begin) * HW + i)] += self.grad[static_cast<std::size_t>(b * n * HW + i)];
  });
}

}  // namespace

std::pair<Tensor, Tensor> channel_split(const Tensor& input, std::int64_t at) {
  require_ndim(input, 4, "channel_split", "input");
  const std::int64_t C = input.dim(1);
  require(at > 0 && at < C, "channel_split: split point " + std::to_string(at) + " must be in (0, " + std::to_string(C) + ")");
  return {channel_slice(input, 0, at), channel_slice(input, at, C)};
}

Tensor channel_concat(const Tensor& a, const Tensor& b) {
  require_ndim(a, 4, "channel_concat", "a");
  require_ndim(b, 4, "channel_concat", "b");
  require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "channel_concat: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::int64_t B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
  Vec out(static_cast<std::size_t>(B * (Ca + Cb) * HW));
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::int64_t n = 0; n < B; ++n) {
    std::copy_n(ad.begin() + n * Ca * HW, Ca * HW, out.begin() + n * (Ca + Cb) * HW);
    std::copy_n(bd.begin() + n * Cb * HW, Cb * HW, out.begin() + (n * (Ca + Cb) + Ca) * HW);
  }
  return make_result({B, Ca + Cb, a.dim(2), a.dim(3)}, std::move(out), {a, b}, [B, Ca, Cb, HW](TensorImpl& self) {
    const std::int64_t C = Ca + Cb;
    if (Vec* g = input_grad(self, 0))
      for (std::int64_t n = 0; n < B; ++n)
        for (std::int64_t i = 0; i < Ca * HW; ++i) (*g)[static_cast<std::size_t>(n * Ca * HW + i)] += self.grad[static_cast<std::size_t>(n * C * HW + i)];
    if (Vec* g = input_grad(self, 1))
      for (std::int64_t n = 0; n < B; ++n)
        for (std::int64_t i = 0; i < Cb * HW; ++i)
          (*g)[static_cast<std::size_t>(n * Cb * HW + i)] += self.grad[static_cast<std::size_t>((n * C + Ca) * HW + i)];
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_ndim(x, 2, "linear", "input");
  require_ndim(weight, 2, "linear", "weight");
  const std::int64_t N = x.dim(0), in = x.dim(1), out_f = weight.dim(0);
  require(weight.dim(1) == in, "linear: input width " + std::to_string(in) + " does not match weight " + shape_str(weight.shape()));
  require(!bias.defined() || bias.numel() == out_f, "linear: bias must have " + std::to_string(out_f) + " entries");
  Vec out(static_cast<std::size_t>(N * out_f));
  MatMap y(out.data(), N, out_f);
  y.noalias() = ConstMatMap(x.data().data(), N, in) * ConstMatMap(weight.data().data(), out_f, in).transpose();
  if (bias.defined()) {
    Eigen::Map<const Eigen::RowVectorXd> bv(bias.data().data(), out_f);
    y.rowwise() += bv;
  }
  return make_result({N, out_f}, std::move(out), {x, weight, bias}, [N, in, out_f](TensorImpl& self) {
    ConstMatMap dy(self.grad.data(), N, out_f);
    if (Vec* g = input_grad(self, 0)) MatMap(g->data(), N, in).noalias() += dy * ConstMatMap(in_data(self, 1).data(), out_f, in);
    if (Vec* g = input_grad(self, 1)) MatMap(g->data(), out_f, in).noalias() += dy.transpose() * ConstMatMap(in_data(self, 0).data(), N, in);
    if (self.inputs[2])
      if (Vec* g = input_grad(self, 2))
        for (std::int64_t n = 0; n < N; ++n)
          for (std::int64_t o = 0; o < out_f; ++o) (*g)[static_cast<std::size_t>(o)] += self.grad[static_cast<std::size_t>(n * out_f + o)];
  });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  require_ndim(a, 3, "bmm", "a");
  require_ndim(b, 3, "bmm", "b");
  const std::int64_t G = a.dim(0), M = a.dim(1), K = a.dim(2);
  const std::int64_t N = transpose_b ? b.dim(1) : b.dim(2);
  const std::int64_t bk = transpose_b ? b.dim(2) : b.dim(1);
  require(b.dim(0) == G && bk == K, "bmm: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  Vec out(static_cast<std::size_t>(G * M * N));
  const std::int64_t bs = K * N;
  for (std::int64_t g = 0; g < G; ++g) {
    ConstMatMap am(a.data().data() + g * M * K, M, K);
    MatMap y(out.data() + g * M * N, M, N);
    if (transpose_b)
      y.noalias() = am * ConstMatMap(b.data().data() + g * bs, N, K).transpose();
    else
      y.noalias() = am * ConstMatMap(b.data().data() + g * bs, K, N);
  }
  return make_result({G, M, N}, std::move(out), {a, b}, [G, M, K, N, transpose_b](TensorImpl& self) {
    Vec* ga = input_grad(self, 0);
    Vec* gb = input_grad(self, 1);
    const Vec& ad = in_data(self, 0);
    const Vec& bd = in_data(self, 1);
    for (std::int64_t g = 0; g < G; ++g) {
      ConstMatMap dy(self.grad.data() + g * M * N, M, N);
      if (ga) {
        MatMap da(ga->data() + g * M * K, M, K);
        if (transpose_b)
          da.noalias() += dy * ConstMatMap(bd.data() + g * K * N, N, K);
        else
          da.noalias() += dy * ConstMatMap(bd.data() + g * K * N, K, N).transpose();
      }
      if (gb) {
        ConstMatMap am(ad.data() + g * M * K, M, K);
        if (transpose_b)
          MatMap(gb->data() + g * K * N, N, K).noalias() += dy.transpose() * am;
        else
          MatMap(gb->data() + g * K * N, K, N).noalias() += am.transpose() * dy;
      }
    }
  });
}

Tensor swap_axes12(const Tensor& x) {
  require_ndim(x, 4, "swap_axes12", "input");
  const std::int64_t A = x.dim(0), B = x.dim(1), C = x.dim(2), D = x.dim(3);
  Vec out(static_cast<std::size_t>(x.numel()));
  const auto xd = x.data();
  for (std::int64_t a = 0; a < A; ++a)
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t c = 0; c < C; ++c)
        std::copy_n(xd.begin() + ((a * B + b) * C + c) * D, D, out.begin() + ((a * C + c) * B + b) * D);
  return make_result({A, C, B, D}, std::move(out), {x}, [A, B, C, D](TensorImpl& self) {
    Vec* g = input_grad(self, 0);
    if (!g) return;
    for (std::int64_t a = 0; a < A; ++a)
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t d = 0; d < D; ++d)
            (*g)[static_cast<std::size_t>(((a * B + b) * C + c) * D + d)] += self.grad[static_cast<std::size_t>(((a * C + c) * B + b) * D + d)];
  });
}

Tensor transpose2d(const Tensor& x) {
  require_ndim(x, 2, "transpose2d", "input");
  const std::int64_t R = x.dim(0), C = x.dim(1);
  Vec out(static_cast<std::size_t>(R * C));
  MatMap(out.data(), C, R) = ConstMatMap(x.data().data(), R, C).transpose();
  return make_result({C, R}, std::move(out), {x}, [R, C](TensorImpl& self) {
    if (Vec* g = input_grad(self, 0)) MatMap(g->data(), R, C) += ConstMatMap(self.grad.data(), C, R).transpose();
  });
}

Tensor softmax_lastdim(const Tensor& x) {
  require(x.ndim() >= 1, "softmax_lastdim: input must have at least one axis");
  const std::int64_t D = x.dim(-1), R = x.numel() / D;
  Vec out = copy_data(x);
  for (std::int64_t r = 0; r < R; ++r) {
    double* row = out.data() + r * D;
    const double m = *std::max_element(row, row + D);
    double s = 0.0;
    for (std::int64_t i = 0; i < D; ++i) s += (row[i] = std::exp(row[i] - m));
    for (std::int64_t i = 0; i < D; ++i) row[i] /= s;
  }
  return make_result(x.shape(), std::move(out), {x}, [R, D](TensorImpl& self) {
    Vec* g = input_grad(self, 0);
    if (!g) return;
    for (std::int64_t r = 0; r < R; ++r) {
      const double* y = self.data.data() + r * D;
      const double* dy = self.grad.data() + r * D;
      double dot = 0.0;
      for (std::int64_t i = 0; i < D; ++i) dot += y[i] * dy[i];
      for (std::int64_t i = 0; i < D; ++i) (*g)[static_cast<std::size_t>(r * D + i)] += y[i] * (dy[i] - dot);
    }
  });
}

Tensor log_softmax_rows(const Tensor& x) {
  require_ndim(x, 2, "log_softmax_rows", "input");
  const std::int64_t R = x.dim(0), D = x.dim(1);
  Vec out = copy_data(x);
  for (std::int64_t r = 0; r < R; ++r) {
    double* row = out.data() + r * D;
    const double m = *std::max_element(row, row + D);
    double s = 0.0;
    for (std::int64_t i = 0; i < D; ++i) s += std::exp(row[i] - m);
    const double lse = m + std::log(s);
    for (std::int64_t i = 0; i < D; ++i) row[i] -= lse;
  }
  return make_result(x.shape(), std::move(out), {x}, [R, D](TensorImpl& self) {
    Vec* g = input_grad(self, 0);
    if (!g) return;
    for (std::int64_t r = 0; r < R; ++r) {
      const double* y = self.data.data() + r * D;
      const double* dy = self.grad.data() + r * D;
      double s = 0.0;
      for (std::int64_t i = 0; i < D; ++i) s += dy[i];
      for (std::int64_t i = 0; i < D; ++i) (*g)[static_cast<std::size_t>(r * D + i)] += dy[i] - std::exp(y[i]) * s;
    }
  });
}

Tensor mean_axis1(const Tensor& x) {
  require_ndim(x, 3, "mean_axis1", "input");
  const std::int64_t B = x.dim(0), T = x.dim(1), D = x.dim(2);
  Vec out(static_cast<std::size_t>(B * D), 0.0);
  const auto xd = x.data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t t = 0; t < T; ++t)
      for (std::int64_t d = 0; d < D; ++d) out[static_cast<std::size_t>(b * D + d)] += xd[static_cast<std::size_t>((b * T + t) * D + d)];
  for (auto& v : out) v /= static_cast<double>(T);
  return make_result({B, D}, std::move(out), {x}, [B, T, D](TensorImpl& self) {
    Vec* g = input_grad(self, 0);
    if (!g) return;
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t t = 0; t < T; ++t)
        for (std::int64_t d = 0; d < D; ++d)
          (*g)[static_cast<std::size_t>((b * T + t) * D + d)] += self.grad[static_cast<std::size_t>(b * D + d)] / static_cast<double>(T);
  });
}

Tensor sum_lastdim(const Tensor& x) {
  require_ndim(x, 2, "sum_lastdim", "input");
  const std::int64_t N = x.dim(0), D = x.dim(1);
  Vec out(static_cast<std::size_t>(N), 0.0);
  const auto xd = x.data();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t d = 0; d < D; ++d) out[static_cast<std::size_t>(n)] += xd[static_cast<std::size_t>(n * D + d)];
  return make_result({N}, std::move(out), {x}, [N, D](TensorImpl& self) {
    Vec* g = input_grad(self, 0);
    if (!g) return;
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t d = 0; d < D; ++d) (*g)[static_cast<std::size_t>(n * D + d)] += self.grad[static_cast<std::size_t>(n)];
  });
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
  require_ndim(x, 2, "l2_normalize_rows", "input");
  const std::int64_t N = x.dim(0), D = x.dim(1);
  Vec out = copy_data(x);
  Vec denom(static_cast<std::size_t>(N));
  std::vector<char> clamped(static_cast<std::size_t>(N));
  for (std::int64_t n = 0; n < N; ++n) {
    double ss = 0.0;
    for (std::int64_t d = 0; d < D; ++d) ss += out[static_cast<std::size_t>(n * D + d)] * out[static_cast<std::size_t>(n * D + d)];
    const double norm = std::sqrt(ss);
    clamped[static_cast<std::size_t>(n)] = norm <= eps;
    denom[static_cast<std::size_t>(n)] = std::max(norm, eps);
    for (std::int64_t d = 0; d < D; ++d) out[static_cast<std::size_t>(n * D + d)] /= denom[static_cast<std::size_t>(n)];
  }
  return make_result(x.shape(), std::move(out), {x},
                     [N, D, denom = std::move(denom), clamped = std::move(clamped)](TensorImpl& self) {
                       Vec* g = input_grad(self, 0);
                       if (!g) return;
                       for (std::int64_t n = 0; n < N; ++n) {
                         const double* y = self.data.data() + n * D;
                         const double* dy = self.grad.data() + n * D;
                         double dot = 0.0;
                         if (!clamped[static_cast<std::size_t>(n)])
                           for (std::int64_t d = 0; d < D; ++d) dot += y[d] * dy[d];
                         for (std::int64_t d = 0; d < D; ++d)
                           (*g)[static_cast<std::size_t>(n * D + d)] += (dy[d] - y[d] * dot) / denom[static_cast<std::size_t>(n)];
                       }
                     });
}

Tensor pad_cols(const Tensor& x, std::int64_t width) {
  require_ndim(x, 2, "pad_cols", "input");
  const std::int64_t N = x.dim(0), D = x.dim(1);
  require(width >= D, "pad_cols: target width " + std::to_string(width) + " smaller than " + std::to_string(D));
  Vec out(static_cast<std::size_t>(N * width), 0.0);
  const auto xd = x.data();
  for (std::int64_t n = 0; n < N; ++n) std::copy_n(xd.begin() + n * D, D, out.begin() + n * width);
  return make_result({N, width}, std::move(out), {x}, [N, D, width](TensorImpl& self) {
    Vec* g = input_grad(self, 0);
    if (!g) return;
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t d = 0; d < D; ++d) (*g)[static_cast<std::size_t>(n * D + d)] += self.grad[static_cast<std::size_t>(n * width + d)];
  });
}

Tensor cosine(const Tensor& u, const Tensor& v, double eps) {
  require(u.numel() == v.numel(), "cosine: length mismatch " + shape_str(u.shape()) + " vs " + shape_str(v.shape()));
  const std::int64_t L = u.numel();
  const Tensor nu = l2_normalize_rows(reshape(u, {1, L}), eps);
  const Tensor nv = l2_normalize_rows(reshape(v, {1, L}), eps);
  return sum(mul(nu, nv));
}

Tensor multi_head_self_attention(const Tensor& seq, const AttentionWeights& w, int heads, Tensor* attention_out) {
  require_ndim(seq, 3, "multi_head_self_attention", "sequence");
  const std::int64_t B = seq.dim(0), T = seq.dim(1), L = seq.dim(2);
  if (heads < 1 || L % heads != 0)
    throw ConfigError("multi_head_self_attention: width " + std::to_string(L) + " not divisible by heads=" + std::to_string(heads));
  const std::int64_t H = heads, d = L / heads;
  const Tensor x = reshape(seq, {B * T, L});
  auto split_heads = [&](const Tensor& t) { return reshape(swap_axes12(reshape(t, {B, T, H, d})), {B * H, T, d}); };
  const Tensor q = split_heads(linear(x, w.wq, w.bq));
  const Tensor k = split_heads(linear(x, w.wk, w.bk));
  const Tensor v = split_heads(linear(x, w.wv, w.bv));
  const Tensor attn = softmax_lastdim(scale(bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(d))));
  if (attention_out) *attention_out = attn;
  const Tensor ctx = reshape(swap_axes12(reshape(bmm(attn, v), {B, H, T, d})), {B * T, L});
  return reshape(linear(ctx, w.wo, w.bo), {B, T, L});
}

}  // namespace lgfd
