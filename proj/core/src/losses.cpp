// SPDX-License-Identifier: Apache-2.0
#include "lgfd/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "lgfd/error.hpp"

namespace lgfd {

void LossConfig::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("loss.tau must be > 0");
  if (!std::isfinite(alpha) || alpha < 0.0) throw ConfigError("loss.alpha must be finite and >= 0");
  if (!std::isfinite(beta) || beta < 0.0) throw ConfigError("loss.beta must be finite and >= 0");
}

Tensor similarity_matrix(const Tensor& obj_embeds, const Tensor& text_embeds, double eps) {
  if (obj_embeds.ndim() != 2 || text_embeds.ndim() != 2)
    throw ShapeError("similarity_matrix: embeddings must be [b,L], got " + shape_str(obj_embeds.shape()) + " and " +
                     shape_str(text_embeds.shape()));
  if (obj_embeds.dim(1) != text_embeds.dim(1))
    throw ShapeError("similarity_matrix: embedding width mismatch, L=" + std::to_string(obj_embeds.dim(1)) + " vs L=" +
                     std::to_string(text_embeds.dim(1)));
  if (obj_embeds.dim(0) != text_embeds.dim(0))
    throw ShapeError("similarity_matrix: batch mismatch, b=" + std::to_string(obj_embeds.dim(0)) + " vs b=" +
                     std::to_string(text_embeds.dim(0)));
  const std::int64_t b = obj_embeds.dim(0), L = obj_embeds.dim(1);
  const Tensor a = l2_normalize_rows(obj_embeds, eps);
  const Tensor t = l2_normalize_rows(text_embeds.detach(), eps);
  return reshape(bmm(reshape(a, {1, b, L}), reshape(t, {1, b, L}), true), {b, b});
}

namespace {

// -(1/b) * trace(x) for a square matrix.
Tensor negative_mean_diagonal(const Tensor& x) {
  const std::int64_t b = x.dim(0);
  std::vector<double> eye(static_cast<std::size_t>(b * b), 0.0);
  for (std::int64_t i = 0; i < b; ++i) eye[static_cast<std::size_t>(i * b + i)] = 1.0;
  return scale(sum(mul(x, Tensor::from_data({b, b}, std::move(eye)))), -1.0 / static_cast<double>(b));
}

}  // namespace

Tensor alignment_loss(const Tensor& similarity, double tau, bool symmetric) {
  if (!(tau > 0.0)) throw ConfigError("alignment_loss: tau must be > 0, got " + std::to_string(tau));
  if (similarity.ndim() != 2 || similarity.dim(0) != similarity.dim(1))
    throw ShapeError("alignment_loss: similarity must be square, got " + shape_str(similarity.shape()));
  const Tensor logits = scale(similarity, 1.0 / tau);
  const Tensor i2t = negative_mean_diagonal(log_softmax_rows(logits));
  if (!symmetric) return i2t;
  const Tensor t2i = negative_mean_diagonal(log_softmax_rows(transpose2d(logits)));
  return scale(add(i2t, t2i), 0.5);
}

Tensor disentangle_loss(const Tensor& f_obj, const Tensor& f_nobj, double eps, bool absolute) {
  if (f_obj.ndim() != 4 || f_nobj.ndim() != 4)
    throw ShapeError("disentangle_loss: feature maps must be [B,C,h,w]");
  if (f_obj.dim(0) != f_nobj.dim(0) || f_obj.dim(2) != f_nobj.dim(2) || f_obj.dim(3) != f_nobj.dim(3))
    throw ShapeError("disentangle_loss: maps disagree outside the channel axis: " + shape_str(f_obj.shape()) + " vs " +
                     shape_str(f_nobj.shape()));
  Tensor po = global_avg_pool(f_obj);
  Tensor pn = global_avg_pool(f_nobj);
  const std::int64_t width = std::max(po.dim(1), pn.dim(1));
  if (po.dim(1) < width) po = pad_cols(po, width);
  if (pn.dim(1) < width) pn = pad_cols(pn, width);
  Tensor cos = sum_lastdim(mul(l2_normalize_rows(po, eps), l2_normalize_rows(pn, eps)));
  if (absolute) cos = lgfd::abs(cos);
  return mean(cos);
}

Tensor disentangle_loss(std::span<const DecomposedLevel> levels, double eps, bool absolute) {
  if (levels.empty()) return Tensor::scalar(0.0);
  Tensor acc;
  for (const auto& lv : levels) {
    const Tensor l = disentangle_loss(lv.f_obj, lv.f_nobj, eps, absolute);
    acc = acc.defined() ? add(acc, l) : l;
  }
  return levels.size() == 1 ? acc : scale(acc, 1.0 / static_cast<double>(levels.size()));
}

int LevelTargets::positives() const {
  return static_cast<int>(std::count(positive.begin(), positive.end(), static_cast<unsigned char>(1)));
}

GridTargets assign_targets(std::span<const std::vector<BBox>> boxes, int image_size,
                           const std::array<double, kNumLevels>& priors) {
  GridTargets out;
  out.batch = static_cast<int>(boxes.size());
  for (int l = 0; l < kNumLevels; ++l) {
    auto& lt = out.levels[static_cast<std::size_t>(l)];
    lt.height = lt.width = std::max(1, image_size / kLevelStrides[static_cast<std::size_t>(l)]);
    const auto cells = static_cast<std::size_t>(out.batch) * static_cast<std::size_t>(lt.height * lt.width);
    lt.positive.assign(cells, 0);
    lt.category.assign(cells, -1);
    lt.box.assign(cells, {0.0, 0.0, 0.0, 0.0});
    lt.assigned_area.assign(cells, 0.0);
  }
  for (int b = 0; b < out.batch; ++b) {
    for (const BBox& box : boxes[static_cast<std::size_t>(b)]) {
      if (!(box.w > 0.0 && box.h > 0.0)) throw DataError("assign_targets: box with non-positive size");
      const double size = std::sqrt(box.w * box.h);
      int level = 0;
      for (int l = 1; l < kNumLevels; ++l)
        if (std::abs(priors[static_cast<std::size_t>(l)] - size) < std::abs(priors[static_cast<std::size_t>(level)] - size))
          level = l;
      auto& lt = out.levels[static_cast<std::size_t>(level)];
      const double stride = kLevelStrides[static_cast<std::size_t>(level)];
      const double gx = box.center_x() / stride, gy = box.center_y() / stride;
      const int j = std::clamp(static_cast<int>(std::floor(gx)), 0, lt.width - 1);
      const int i = std::clamp(static_cast<int>(std::floor(gy)), 0, lt.height - 1);
      const auto cell = static_cast<std::size_t>((b * lt.height + i) * lt.width + j);
      if (lt.positive[cell]) {
        ++out.skipped;
        if (box.area() <= lt.assigned_area[cell]) continue;
      } else {
        ++out.assigned;
      }
      const double prior = priors[static_cast<std::size_t>(level)];
      lt.positive[cell] = 1;
      lt.category[cell] = box.category_id;
      lt.assigned_area[cell] = box.area();
      lt.box[cell] = {std::clamp(gx - j, 0.0, 1.0), std::clamp(gy - i, 0.0, 1.0), std::log(box.w / prior),
                      std::log(box.h / prior)};
    }
  }
  return out;
}

namespace {

// Numerically stable BCE with logits; value and d/dz.
inline double bce(double z, double y) { return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z))); }
inline double sigm(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline double smooth_l1(double d) { return std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5; }
inline double smooth_l1_grad(double d) { return std::abs(d) < 1.0 ? d : (d > 0.0 ? 1.0 : -1.0); }

struct LevelTerms {
  double obj = 0.0, cls = 0.0, box = 0.0;
};

// One fused node per level: inputs (objectness, cls, box) -> weighted scalar.
Tensor level_detection_loss(const LevelPrediction& p, const LevelTargets& t, const DetectionLossWeights& wts,
                            LevelTerms& terms) {
  const std::int64_t B = p.objectness.dim(0), h = p.objectness.dim(2), w = p.objectness.dim(3);
  const std::int64_t C = p.cls.dim(1), hw = h * w;
  if (h != t.height || w != t.width || static_cast<std::size_t>(B * hw) != t.positive.size())
    throw ShapeError("detection_loss: prediction grid " + shape_str(p.objectness.shape()) +
                     " does not match the assigned targets");
  const auto obj = p.objectness.data();
  const auto cls = p.cls.data();
  const auto box = p.box.data();
  const double n_cells = static_cast<double>(B * hw);
  const int n_pos = t.positives();

  for (std::int64_t c = 0; c < B * hw; ++c) terms.obj += bce(obj[static_cast<std::size_t>(c)], t.positive[static_cast<std::size_t>(c)]);
  terms.obj /= n_cells;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t s = 0; s < hw; ++s) {
      const auto cell = static_cast<std::size_t>(b * hw + s);
      if (!t.positive[cell]) continue;
      for (std::int64_t k = 0; k < C; ++k) {
        const double z = cls[static_cast<std::size_t>((b * C + k) * hw + s)];
        terms.cls += bce(z, t.category[cell] == k ? 1.0 : 0.0);
      }
      for (std::int64_t k = 0; k < 4; ++k) {
        double v = box[static_cast<std::size_t>((b * 4 + k) * hw + s)];
        if (k < 2) v = sigm(v);
        terms.box += smooth_l1(v - t.box[cell][static_cast<std::size_t>(k)]);
      }
    }
  if (n_pos > 0) {
    terms.cls /= n_pos;
    terms.box /= n_pos;
  }
  const double value = wts.objectness * terms.obj + wts.classification * terms.cls + wts.box * terms.box;

  // The closure keeps its own copy of the targets so it outlives the caller's.
  return make_result({}, {value}, {p.objectness, p.cls, p.box},
                     [t, wts, B, C, hw, n_cells, n_pos](TensorImpl& self) {
                       const double g = self.grad[0];
                       if (auto* go = input_grad(self, 0)) {
                         const auto& z = self.inputs[0]->data;
                         for (std::size_t c = 0; c < z.size(); ++c)
                           (*go)[c] += g * wts.objectness * (sigm(z[c]) - t.positive[c]) / n_cells;
                       }
                       if (n_pos == 0) return;
                       auto* gc = input_grad(self, 1);
                       auto* gb = input_grad(self, 2);
                       const auto& zc = self.inputs[1]->data;
                       const auto& zb = self.inputs[2]->data;
                       for (std::int64_t b = 0; b < B; ++b)
                         for (std::int64_t s = 0; s < hw; ++s) {
                           const auto cell = static_cast<std::size_t>(b * hw + s);
                           if (!t.positive[cell]) continue;
                           if (gc)
                             for (std::int64_t k = 0; k < C; ++k) {
                               const auto at = static_cast<std::size_t>((b * C + k) * hw + s);
                               const double y = t.category[cell] == k ? 1.0 : 0.0;
                               (*gc)[at] += g * wts.classification * (sigm(zc[at]) - y) / n_pos;
                             }
                           if (gb)
                             for (std::int64_t k = 0; k < 4; ++k) {
                               const auto at = static_cast<std::size_t>((b * 4 + k) * hw + s);
                               double v = zb[at], dv = 1.0;
                               if (k < 2) {
                                 v = sigm(v);
                                 dv = v * (1.0 - v);
                               }
                               const double d = v - t.box[cell][static_cast<std::size_t>(k)];
                               (*gb)[at] += g * wts.box * smooth_l1_grad(d) * dv / n_pos;
                             }
                         }
                     });
}

}  // namespace

DetectionLossParts detection_loss(const DensePrediction& pred, const GridTargets& targets,
                                  const DetectionLossWeights& weights) {
  DetectionLossParts out;
  for (int l = 0; l < kNumLevels; ++l) {
    LevelTerms terms;
    const Tensor v = level_detection_loss(pred.levels[static_cast<std::size_t>(l)],
                                          targets.levels[static_cast<std::size_t>(l)], weights, terms);
    out.objectness[static_cast<std::size_t>(l)] = terms.obj;
    out.classification[static_cast<std::size_t>(l)] = terms.cls;
    out.box[static_cast<std::size_t>(l)] = terms.box;
    out.total = out.total.defined() ? add(out.total, v) : v;
  }
  return out;
}

LossBundle total_loss(const Tensor& l_det, const Tensor& l_al, const Tensor& l_ds, double alpha, double beta) {
  LossBundle bundle{l_det, l_al, l_ds, alpha, beta, {}};
  bundle.total = add(add(l_det, scale(l_al, alpha)), scale(l_ds, beta));
  return bundle;
}

LossBundle compute_losses(const TrainOutputs& outputs, const GridTargets& targets, const LossConfig& config) {
  const Tensor l_det = detection_loss(outputs.prediction, targets).total;
  Tensor l_al = Tensor::scalar(0.0);
  if (outputs.object_embedding.defined())
    l_al = alignment_loss(similarity_matrix(outputs.object_embedding, outputs.text_embedding), config.tau,
                          config.symmetric_al);
  const Tensor l_ds = disentangle_loss(outputs.decomposed, kCosineEps, config.abs_ds);
  return total_loss(l_det, l_al, l_ds, config.alpha, config.beta);
}

}  // namespace lgfd
