// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lgfd/caption.hpp"
#include "lgfd/ops.hpp"
#include "lgfd/parameter.hpp"
#include "lgfd/rng.hpp"

namespace lgfd {

enum class Level { kP3 = 0, kP4 = 1, kP5 = 2 };
inline constexpr int kNumLevels = 3;
inline constexpr std::array<int, kNumLevels> kLevelStrides = {8, 16, 32};
std::string level_name(Level level);  // "p3", "p4", "p5"

/// Which part of a decomposed level feeds the detection head.
enum class HeadInput { kObject, kNonObject, kConcat };
std::string head_input_name(HeadInput h);
HeadInput parse_head_input(const std::string& s);

/// Projector front end: none, one 1x1 CBR, one 3x3 CBR, or two 3x3 CBRs.
enum class CbrKind { kNone, k1x1, k3x3, k3x3x2 };
std::string cbr_name(CbrKind k);
CbrKind parse_cbr(const std::string& s);

struct ModelConfig {
  int L = 32;
  std::array<bool, kNumLevels> decompose = {true, true, false};
  double ratio = 0.5;
  int pool_size = 4;  // clamped per level to the map size
  int heads = 2;
  int num_classes = 3;
  int image_size = 64;
  CbrKind cbr = CbrKind::k1x1;
  HeadInput head_input = HeadInput::kObject;
  std::array<double, kNumLevels> priors = {8.0, 24.0, 56.0};

  /// Throws ConfigError naming the offending key.
  void validate() const;
  bool decomposed(Level l) const { return decompose[static_cast<std::size_t>(l)]; }
  /// round(2L * ratio)
  int object_channels() const;
  int nonobject_channels() const { return 2 * L - object_channels(); }
  /// 2L for decomposed levels, L otherwise.
  int level_channels(Level l) const;
  int head_in_channels(Level l) const;
  int stem_channels() const { return L / 2 > 0 ? L / 2 : 1; }
};

struct BackboneFeatures {
  Tensor c3, c4, c5;  // strides 8, 16, 32
};

struct PyramidFeatures {
  std::array<Tensor, kNumLevels> levels;  // p3, p4, p5
  const Tensor& at(Level l) const { return levels[static_cast<std::size_t>(l)]; }
};

struct DecomposedLevel {
  Level level;
  Tensor f_ori, f_obj, f_nobj;
};

struct LevelPrediction {
  Tensor objectness;  // [B,1,h,w] logits
  Tensor cls;         // [B,C,h,w] logits
  Tensor box;         // [B,4,h,w]: (tx, ty) offsets through a sigmoid, (tw, th) log size over the prior
  int stride = 0;
  double prior = 0.0;
};

struct DensePrediction {
  std::array<LevelPrediction, kNumLevels> levels;
};

struct TrainOutputs {
  DensePrediction prediction;
  std::vector<DecomposedLevel> decomposed;
  Tensor object_embedding;  // [B,L], mean of the per-level projections; undefined when nothing is decomposed
  Tensor text_embedding;    // [B,L], no gradient
};

/// The detector: backbone, feature pyramid, channel decomposition, projector
/// and a dense head that only ever sees the object channels of decomposed
/// levels.
class Detector {
 public:
  Detector(const ModelConfig& config, std::uint64_t seed, std::shared_ptr<const TextEncoder> encoder = nullptr);
  Detector(const Detector&) = delete;
  Detector& operator=(const Detector&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }
  const TextEncoder& encoder() const { return *encoder_; }

  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }

  BackboneFeatures backbone_forward(const Tensor& images);
  PyramidFeatures fpn_forward(const BackboneFeatures& stages);
  DecomposedLevel decompose(const Tensor& f_ori, Level level) const;
  /// [B,L_obj,h,w] -> [B,L]
  Tensor project(const Tensor& f_obj, Level level);
  /// Selects what the head sees at each level according to config.head_input.
  std::array<Tensor, kNumLevels> head_inputs(const PyramidFeatures& pyramid,
                                             const std::vector<DecomposedLevel>& decomposed) const;
  DensePrediction detect_head(const std::array<Tensor, kNumLevels>& inputs);

  TrainOutputs forward_train(const Tensor& images, std::span<const std::string> captions);
  /// Detection path only; no captions, no projector.
  DensePrediction forward_infer(const Tensor& images);

  /// Text features for a batch of captions, [B,L] without gradient.
  Tensor encode_captions(std::span<const std::string> captions) const;

  std::int64_t projector_calls() const { return projector_calls_; }

 private:
  struct Conv {
    Tensor weight, bias;
    int stride = 1;
    int padding = 0;
    Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }
  };
  struct Norm {
    Tensor gamma, beta;
    BatchNormState state;
  };
  struct ConvNormRelu {
    Conv conv;
    Norm norm;
  };
  struct Projector {
    std::vector<ConvNormRelu> cbr;
    AttentionWeights attention;
  };
  struct Head {
    ConvNormRelu conv1, conv2;
    Conv objectness, cls, box;
  };

  Conv make_conv(Rng& rng, const std::string& name, int in, int out, int kernel, int stride, bool bias, double gain);
  Norm make_norm(const std::string& name, int channels);
  ConvNormRelu make_cnr(Rng& rng, const std::string& name, int in, int out, int kernel, int stride);
  Tensor run_cnr(ConvNormRelu& block, const Tensor& x);
  NormMode norm_mode() const { return training_ ? NormMode::kTrain : NormMode::kEval; }

  ModelConfig config_;
  std::shared_ptr<const TextEncoder> encoder_;
  ParameterSet params_;
  std::array<ConvNormRelu, 4> backbone_;
  std::array<Conv, kNumLevels> lateral_;
  std::array<Conv, kNumLevels> smooth_;
  std::array<Projector, kNumLevels> projector_;
  std::array<Head, kNumLevels> head_;
  bool training_ = true;
  std::int64_t projector_calls_ = 0;
};

}  // namespace lgfd
