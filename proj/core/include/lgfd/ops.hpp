// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <utility>

#include "lgfd/tensor.hpp"

namespace lgfd {

// Elementwise and reductions. Binary elementwise ops require equal shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor relu(const Tensor& a);

/// While alive, fingerprints the sign pattern (x > 0) of every relu input on
/// this thread. Two evaluations with equal fingerprints took the same linear
/// piece of every relu.
class ReluSignRecorder {
 public:
  ReluSignRecorder();
  ~ReluSignRecorder();
  ReluSignRecorder(const ReluSignRecorder&) = delete;
  ReluSignRecorder& operator=(const ReluSignRecorder&) = delete;
  void record(std::span<const double> x);
  std::uint64_t fingerprint() const { return hash_ ^ count_; }

 private:
  ReluSignRecorder* previous_;
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
  std::uint64_t count_ = 0;
};
Tensor sigmoid(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

/// Cross-correlation. input [B,C,H,W], weight [O,C,k,k], bias [O] or undefined.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding);

/// Running statistics of a batch-norm layer; updated in place in train mode.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  static BatchNormState init(std::int64_t channels);
};

enum class NormMode { kTrain, kEval };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

Tensor batch_norm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta, BatchNormState& state, NormMode mode,
                    double eps = kBatchNormEps, double momentum = kBatchNormMomentum);

/// Output cell i covers rows [floor(i*H/S), ceil((i+1)*H/S)); same for columns.
Tensor adaptive_avg_pool2d(const Tensor& input, int out_size);
/// [B,C,H,W] -> [B,C]
Tensor global_avg_pool(const Tensor& input);
Tensor upsample_nearest2x(const Tensor& input);

std::pair<Tensor, Tensor> channel_split(const Tensor& input, std::int64_t at);
Tensor channel_concat(const Tensor& a, const Tensor& b);

/// x [N,in], weight [out,in], bias [out] -> [N,out]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
/// a [G,M,K] times b [G,K,N] (or b [G,N,K] when transpose_b) -> [G,M,N]
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);
/// [A,B,C,D] -> [A,C,B,D]
Tensor swap_axes12(const Tensor& x);
Tensor transpose2d(const Tensor& x);
Tensor softmax_lastdim(const Tensor& x);
/// Row-wise log-softmax of a [N,M] matrix, max-shifted.
Tensor log_softmax_rows(const Tensor& x);
/// [B,T,D] -> [B,D], mean over T.
Tensor mean_axis1(const Tensor& x);
/// [N,D] -> [N]
Tensor sum_lastdim(const Tensor& x);
/// Each row divided by max(||row||, eps).
Tensor l2_normalize_rows(const Tensor& x, double eps);
/// [N,D] -> [N,width] zero padded on the right; width >= D.
Tensor pad_cols(const Tensor& x, std::int64_t width);

/// u.v / (max(|u|,eps) max(|v|,eps)) for two equal-length vectors.
Tensor cosine(const Tensor& u, const Tensor& v, double eps = 1e-8);

struct AttentionWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // each w [L,L], b [L]
};

/// Scaled dot-product self-attention over seq [B,T,L] with `heads` heads of
/// width L/heads. When `attention_out` is given it receives the softmax
/// weights [B*heads, T, T].
Tensor multi_head_self_attention(const Tensor& seq, const AttentionWeights& w, int heads,
                                 Tensor* attention_out = nullptr);

}  // namespace lgfd
