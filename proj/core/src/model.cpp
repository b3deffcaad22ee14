// SPDX-License-Identifier: Apache-2.0
#include "lgfd/model.hpp"

#include <algorithm>
#include <cmath>

#include "lgfd/error.hpp"

namespace lgfd {

std::string level_name(Level level) {
  static const std::array<const char*, kNumLevels> names = {"p3", "p4", "p5"};
  return names[static_cast<std::size_t>(level)];
}

std::string head_input_name(HeadInput h) {
  switch (h) {
    case HeadInput::kObject: return "obj";
    case HeadInput::kNonObject: return "nobj";
    case HeadInput::kConcat: return "concat";
  }
  return "obj";
}

HeadInput parse_head_input(const std::string& s) {
  if (s == "obj") return HeadInput::kObject;
  if (s == "nobj") return HeadInput::kNonObject;
  if (s == "concat") return HeadInput::kConcat;
  throw ConfigError("model.head_input must be one of obj, nobj, concat; got '" + s + "'");
}

std::string cbr_name(CbrKind k) {
  switch (k) {
    case CbrKind::kNone: return "none";
    case CbrKind::k1x1: return "1x1";
    case CbrKind::k3x3: return "3x3";
    case CbrKind::k3x3x2: return "3x3x2";
  }
  return "1x1";
}

CbrKind parse_cbr(const std::string& s) {
  if (s == "none") return CbrKind::kNone;
  if (s == "1x1") return CbrKind::k1x1;
  if (s == "3x3") return CbrKind::k3x3;
  if (s == "3x3x2") return CbrKind::k3x3x2;
  throw ConfigError("model.cbr must be one of none, 1x1, 3x3, 3x3x2; got '" + s + "'");
}

int ModelConfig::object_channels() const { return static_cast<int>(std::lround(2.0 * L * ratio)); }

int ModelConfig::level_channels(Level l) const { return decomposed(l) ? 2 * L : L; }

int ModelConfig::head_in_channels(Level l) const {
  if (!decomposed(l)) return L;
  switch (head_input) {
    case HeadInput::kObject: return object_channels();
    case HeadInput::kNonObject: return nonobject_channels();
    case HeadInput::kConcat: return 2 * L;
  }
  return object_channels();
}

void ModelConfig::validate() const {
  if (L < 2) throw ConfigError("model.L must be >= 2, got " + std::to_string(L));
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("model.ratio must lie in (0, 1)");
  if (object_channels() < 1 || nonobject_channels() < 1)
    throw ConfigError("model.ratio leaves an empty half: round(2L*ratio) = " + std::to_string(object_channels()));
  if (heads < 1 || L % heads != 0) throw ConfigError("model.heads must divide model.L");
  if (num_classes < 1) throw ConfigError("model.num_classes must be >= 1");
  if (image_size < 32 || image_size % 32 != 0) throw ConfigError("model.image_size must be a positive multiple of 32");
  for (int i = 0; i < kNumLevels; ++i) {
    if (!(priors[static_cast<std::size_t>(i)] > 0.0)) throw ConfigError("model.priors must be positive");
  }
  if (pool_size < 1) throw ConfigError("model.pool_size must be >= 1");
  if (cbr == CbrKind::kNone && object_channels() != L)
    throw ConfigError("model.cbr = none requires round(2L*ratio) == L so the projector output matches the text width");
}

Detector::Conv Detector::make_conv(Rng& rng, const std::string& name, int in, int out, int kernel, int stride,
                                   bool bias, double gain) {
  Conv c;
  c.stride = stride;
  c.padding = kernel / 2;
  const int fan_in = in * kernel * kernel;
  const double bound = gain * std::sqrt(3.0 / fan_in);
  std::vector<double> w(static_cast<std::size_t>(out) * static_cast<std::size_t>(fan_in));
  for (auto& v : w) v = rng.uniform(-bound, bound);
  c.weight = params_.add(name + ".weight", Tensor::from_data({out, in, kernel, kernel}, std::move(w)));
  if (bias) c.bias = params_.add(name + ".bias", Tensor::zeros({out}));
  return c;
}

Detector::Norm Detector::make_norm(const std::string& name, int channels) {
  Norm n;
  n.gamma = params_.add(name + ".gamma", Tensor::full({channels}, 1.0));
  n.beta = params_.add(name + ".beta", Tensor::zeros({channels}));
  n.state = BatchNormState::init(channels);
  params_.add_buffer(name + ".running_mean", n.state.running_mean);
  params_.add_buffer(name + ".running_var", n.state.running_var);
  return n;
}

Detector::ConvNormRelu Detector::make_cnr(Rng& rng, const std::string& name, int in, int out, int kernel, int stride) {
  ConvNormRelu b;
  b.conv = make_conv(rng, name + ".conv", in, out, kernel, stride, false, std::sqrt(2.0));
  b.norm = make_norm(name + ".bn", out);
  return b;
}

Tensor Detector::run_cnr(ConvNormRelu& block, const Tensor& x) {
  return relu(batch_norm2d(block.conv(x), block.norm.gamma, block.norm.beta, block.norm.state, norm_mode()));
}

Detector::Detector(const ModelConfig& config, std::uint64_t seed, std::shared_ptr<const TextEncoder> encoder)
    : config_(config), encoder_(std::move(encoder)) {
  config_.validate();
  if (!encoder_) encoder_ = std::make_shared<HashTextEncoder>(config_.L);
  if (encoder_->dim() != config_.L)
    throw ConfigError("text encoder width " + std::to_string(encoder_->dim()) + " differs from model.L " + std::to_string(config_.L));

  Rng rng(seed);
  const int L = config_.L;
  backbone_[0] = make_cnr(rng, "backbone.stem", 1, config_.stem_channels(), 3, 4);
  backbone_[1] = make_cnr(rng, "backbone.c3", config_.stem_channels(), L, 3, 2);
  backbone_[2] = make_cnr(rng, "backbone.c4", L, 2 * L, 3, 2);
  backbone_[3] = make_cnr(rng, "backbone.c5", 2 * L, 2 * L, 3, 2);

  const std::array<int, kNumLevels> stage_channels = {L, 2 * L, 2 * L};
  for (int i = 0; i < kNumLevels; ++i) {
    const auto lv = static_cast<Level>(i);
    const std::string p = "fpn." + level_name(lv);
    lateral_[static_cast<std::size_t>(i)] = make_conv(rng, p + ".lateral", stage_channels[static_cast<std::size_t>(i)], 2 * L, 1, 1, true, 1.0);
    smooth_[static_cast<std::size_t>(i)] = make_conv(rng, p + ".smooth", 2 * L, config_.level_channels(lv), 3, 1, true, 1.0);
  }

  for (int i = 0; i < kNumLevels; ++i) {
    const auto lv = static_cast<Level>(i);
    if (!config_.decomposed(lv)) continue;
    auto& pr = projector_[static_cast<std::size_t>(i)];
    const std::string p = "proj." + level_name(lv);
    const int in = config_.object_channels();
    switch (config_.cbr) {
      case CbrKind::kNone: break;
      case CbrKind::k1x1: pr.cbr.push_back(make_cnr(rng, p + ".cbr0", in, L, 1, 1)); break;
      case CbrKind::k3x3: pr.cbr.push_back(make_cnr(rng, p + ".cbr0", in, L, 3, 1)); break;
      case CbrKind::k3x3x2:
        pr.cbr.push_back(make_cnr(rng, p + ".cbr0", in, L, 3, 1));
        pr.cbr.push_back(make_cnr(rng, p + ".cbr1", L, L, 3, 1));
        break;
    }
    auto lin = [&](const std::string& n) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(L));
      std::vector<double> w(static_cast<std::size_t>(L * L));
      for (auto& v : w) v = rng.uniform(-bound, bound);
      return params_.add(p + ".attn." + n, Tensor::from_data({L, L}, std::move(w)));
    };
    auto bias = [&](const std::string& n) { return params_.add(p + ".attn." + n, Tensor::zeros({L})); };
    auto& a = pr.attention;
    a.wq = lin("wq");
    a.bq = bias("bq");
    a.wk = lin("wk");
    a.bk = bias("bk");
    a.wv = lin("wv");
    a.bv = bias("bv");
    a.wo = lin("wo");
    a.bo = bias("bo");
  }

  // Objectness and class logits start at a 1% prior.
  const double prior_logit = -std::log(99.0);
  for (int i = 0; i < kNumLevels; ++i) {
    const auto lv = static_cast<Level>(i);
    auto& h = head_[static_cast<std::size_t>(i)];
    const std::string p = "head." + level_name(lv);
    h.conv1 = make_cnr(rng, p + ".conv1", config_.head_in_channels(lv), L, 3, 1);
    h.conv2 = make_cnr(rng, p + ".conv2", L, L, 3, 1);
    h.objectness = make_conv(rng, p + ".obj", L, 1, 1, 1, true, 0.1);
    h.cls = make_conv(rng, p + ".cls", L, config_.num_classes, 1, 1, true, 0.1);
    h.box = make_conv(rng, p + ".box", L, 4, 1, 1, true, 0.1);
    std::fill(h.objectness.bias.data().begin(), h.objectness.bias.data().end(), prior_logit);
    std::fill(h.cls.bias.data().begin(), h.cls.bias.data().end(), prior_logit);
  }
}

BackboneFeatures Detector::backbone_forward(const Tensor& images) {
  if (images.ndim() != 4 || images.dim(1) != 1)
    throw ShapeError("backbone_forward: images must be [B,1,H,W], got " + shape_str(images.shape()));
  if (images.dim(2) % 32 != 0 || images.dim(3) % 32 != 0)
    throw ShapeError("backbone_forward: image height and width must be divisible by 32, got " + shape_str(images.shape()));
  const Tensor s = run_cnr(backbone_[0], images);
  BackboneFeatures f;
  f.c3 = run_cnr(backbone_[1], s);
  f.c4 = run_cnr(backbone_[2], f.c3);
  f.c5 = run_cnr(backbone_[3], f.c4);
  return f;
}

PyramidFeatures Detector::fpn_forward(const BackboneFeatures& stages) {
  const Tensor m5 = lateral_[2](stages.c5);
  const Tensor m4 = add(lateral_[1](stages.c4), upsample_nearest2x(m5));
  const Tensor m3 = add(lateral_[0](stages.c3), upsample_nearest2x(m4));
  PyramidFeatures p;
  p.levels = {smooth_[0](m3), smooth_[1](m4), smooth_[2](m5)};
  return p;
}

DecomposedLevel Detector::decompose(const Tensor& f_ori, Level level) const {
  if (!config_.decomposed(level)) throw ConfigError("level " + level_name(level) + " is not configured for decomposition");
  auto [obj, nobj] = channel_split(f_ori, config_.object_channels());
  return {level, f_ori, std::move(obj), std::move(nobj)};
}

Tensor Detector::project(const Tensor& f_obj, Level level) {
  if (!config_.decomposed(level)) throw ConfigError("level " + level_name(level) + " has no projector");
  ++projector_calls_;
  auto& pr = projector_[static_cast<std::size_t>(level)];
  Tensor x = f_obj;
  for (auto& block : pr.cbr) x = run_cnr(block, x);
  const std::int64_t B = x.dim(0), C = x.dim(1);
  const std::int64_t S = std::min<std::int64_t>(config_.pool_size, std::min(x.dim(2), x.dim(3)));
  x = adaptive_avg_pool2d(x, static_cast<int>(S));
  // [B,C,S,S] -> [B,S*S,C]
  const Tensor seq = reshape(swap_axes12(reshape(x, {B, C, S * S, 1})), {B, S * S, C});
  return mean_axis1(multi_head_self_attention(seq, pr.attention, config_.heads));
}

std::array<Tensor, kNumLevels> Detector::head_inputs(const PyramidFeatures& pyramid,
                                                     const std::vector<DecomposedLevel>& decomposed) const {
  std::array<Tensor, kNumLevels> in;
  for (int i = 0; i < kNumLevels; ++i) in[static_cast<std::size_t>(i)] = pyramid.levels[static_cast<std::size_t>(i)];
  for (const auto& d : decomposed) {
    auto& slot = in[static_cast<std::size_t>(d.level)];
    switch (config_.head_input) {
      case HeadInput::kObject: slot = d.f_obj; break;
      case HeadInput::kNonObject: slot = d.f_nobj; break;
      case HeadInput::kConcat: slot = channel_concat(d.f_obj, d.f_nobj); break;
    }
  }
  return in;
}

DensePrediction Detector::detect_head(const std::array<Tensor, kNumLevels>& inputs) {
  DensePrediction out;
  for (int i = 0; i < kNumLevels; ++i) {
    auto& h = head_[static_cast<std::size_t>(i)];
    const Tensor x = run_cnr(h.conv2, run_cnr(h.conv1, inputs[static_cast<std::size_t>(i)]));
    auto& lp = out.levels[static_cast<std::size_t>(i)];
    lp.objectness = h.objectness(x);
    lp.cls = h.cls(x);
    lp.box = h.box(x);
    lp.stride = kLevelStrides[static_cast<std::size_t>(i)];
    lp.prior = config_.priors[static_cast<std::size_t>(i)];
  }
  return out;
}

Tensor Detector::encode_captions(std::span<const std::string> captions) const {
  const auto B = static_cast<std::int64_t>(captions.size());
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(B * config_.L));
  for (const auto& c : captions) {
    const auto e = encoder_->encode(tokenize(c));
    data.insert(data.end(), e.begin(), e.end());
  }
  return Tensor::from_data({B, config_.L}, std::move(data));
}

TrainOutputs Detector::forward_train(const Tensor& images, std::span<const std::string> captions) {
  if (images.ndim() != 4) throw ShapeError("forward_train: images must be [B,1,H,W]");
  if (static_cast<std::int64_t>(captions.size()) != images.dim(0))
    throw ShapeError("forward_train: " + std::to_string(captions.size()) + " captions for " + std::to_string(images.dim(0)) +
                     " images");
  if (training_ && images.dim(0) < 2) throw ShapeError("forward_train: training needs a batch of at least 2 images");

  TrainOutputs out;
  const PyramidFeatures pyramid = fpn_forward(backbone_forward(images));
  Tensor embedding_sum;
  int projected = 0;
  for (int i = 0; i < kNumLevels; ++i) {
    const auto lv = static_cast<Level>(i);
    if (!config_.decomposed(lv)) continue;
    out.decomposed.push_back(decompose(pyramid.at(lv), lv));
    const Tensor e = project(out.decomposed.back().f_obj, lv);
    embedding_sum = embedding_sum.defined() ? add(embedding_sum, e) : e;
    ++projected;
  }
  if (projected > 0) out.object_embedding = projected == 1 ? embedding_sum : scale(embedding_sum, 1.0 / projected);
  out.text_embedding = encode_captions(captions);
  out.prediction = detect_head(head_inputs(pyramid, out.decomposed));
  return out;
}

DensePrediction Detector::forward_infer(const Tensor& images) {
  const PyramidFeatures pyramid = fpn_forward(backbone_forward(images));
  std::vector<DecomposedLevel> decomposed;
  for (int i = 0; i < kNumLevels; ++i) {
    const auto lv = static_cast<Level>(i);
    if (config_.decomposed(lv)) decomposed.push_back(decompose(pyramid.at(lv), lv));
  }
  return detect_head(head_inputs(pyramid, decomposed));
}

}  // namespace lgfd
