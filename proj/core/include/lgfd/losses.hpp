// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <span>
#include <vector>

#include "lgfd/bbox.hpp"
#include "lgfd/model.hpp"

namespace lgfd {

struct LossConfig {
  double tau = 0.07;
  double alpha = 1.0;
  double beta = 1.0;
  bool symmetric_al = false;  // add the text->image direction
  bool abs_ds = false;        // penalize |cos| instead of cos
  void validate() const;
};

struct LossBundle {
  Tensor l_det, l_al, l_ds;
  double alpha = 0.0;
  double beta = 0.0;
  Tensor total;
};

inline constexpr double kCosineEps = 1e-8;

/// S[i][j] = cos(obj_i, text_j). The text side never takes a gradient.
Tensor similarity_matrix(const Tensor& obj_embeds, const Tensor& text_embeds, double eps = kCosineEps);

/// Image-to-text InfoNCE over a [b,b] similarity matrix:
/// -(1/b) sum_i log softmax_j(S_ij / tau)[i]. With `symmetric` the
/// text-to-image direction is averaged in.
Tensor alignment_loss(const Tensor& similarity, double tau, bool symmetric = false);

/// Mean over the batch of cos(avgpool(f_obj), avgpool(f_nobj)). When the two
/// halves differ in width the shorter pooled vector is zero padded.
Tensor disentangle_loss(const Tensor& f_obj, const Tensor& f_nobj, double eps = kCosineEps, bool absolute = false);
/// Mean of the per-level losses; a constant zero when nothing is decomposed.
Tensor disentangle_loss(std::span<const DecomposedLevel> levels, double eps = kCosineEps, bool absolute = false);

struct LevelTargets {
  int height = 0;
  int width = 0;
  std::vector<unsigned char> positive;      // [B*h*w]
  std::vector<int> category;                // [B*h*w], -1 when negative
  std::vector<std::array<double, 4>> box;   // (offset x, offset y, log(w/prior), log(h/prior))
  std::vector<double> assigned_area;        // bookkeeping for collisions
  int positives() const;
};

struct GridTargets {
  int batch = 0;
  std::array<LevelTargets, kNumLevels> levels;
  int assigned = 0;
  int skipped = 0;  // boxes that lost a cell collision to a larger box
};

/// Each box goes to the cell containing its center at the level whose prior
/// is closest to sqrt(w*h); a collision keeps the larger box.
GridTargets assign_targets(std::span<const std::vector<BBox>> boxes, int image_size,
                           const std::array<double, kNumLevels>& priors);

struct DetectionLossWeights {
  double objectness = 1.0;
  double classification = 1.0;
  double box = 5.0;
};

struct DetectionLossParts {
  Tensor total;
  std::array<double, kNumLevels> objectness{};
  std::array<double, kNumLevels> classification{};
  std::array<double, kNumLevels> box{};
};

/// Sum over levels of: BCE(objectness, all cells) + BCE(class, positive cells)
/// + smooth-L1(box, positive cells), each averaged within the level.
DetectionLossParts detection_loss(const DensePrediction& pred, const GridTargets& targets,
                                  const DetectionLossWeights& weights = {});

LossBundle total_loss(const Tensor& l_det, const Tensor& l_al, const Tensor& l_ds, double alpha, double beta);

/// All three components from a forward_train result.
LossBundle compute_losses(const TrainOutputs& outputs, const GridTargets& targets, const LossConfig& config);

}  // namespace lgfd
