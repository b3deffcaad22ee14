// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lgfd/bbox.hpp"
#include "lgfd/data.hpp"
#include "lgfd/model.hpp"

namespace lgfd {

struct Detection {
  BBox box;
  int category_id = 0;
  double score = 0.0;
};

struct DecodeConfig {
  double score_thresh = 0.05;
  double nms_iou = 0.5;
  int max_detections = 100;
};

/// Per image: every (cell, class) with sigmoid(obj) * sigmoid(cls) above the
/// threshold becomes a box centered at ((j + sigmoid(tx)) * stride,
/// (i + sigmoid(ty)) * stride) of size prior * exp(tw, th), clipped to the
/// image; then greedy class-wise NMS, sorted by score, capped.
std::vector<std::vector<Detection>> decode(const DensePrediction& pred, int image_size, const DecodeConfig& config = {});

/// Greedy NMS over one class; `dets` is re-sorted by descending score (stable).
std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh);

struct AreaRange {
  double lo = 0.0;
  double hi = std::numeric_limits<double>::infinity();
  bool contains(double area) const { return area >= lo && area < hi; }
};
inline constexpr double kSmallArea = 32.0 * 32.0;
inline constexpr double kMediumArea = 96.0 * 96.0;

/// All-point AP for one class. `detections[i]` and `ground_truth[i]` belong
/// to image i and hold only this class. Ground truth outside `range` is
/// ignored, as are detections matched to it and unmatched detections outside
/// it. Returns nullopt when no ground truth counts.
std::optional<double> average_precision(std::span<const std::vector<Detection>> detections,
                                        std::span<const std::vector<BBox>> ground_truth, double iou_thresh,
                                        const AreaRange& range = {});

struct ClassMetrics {
  double ap50 = 0.0;
  double map = 0.0;
  int gt_count = 0;
};

struct EvalReport {
  double map = 0.0;
  double ap50 = 0.0;
  double ap75 = 0.0;
  double ap_s = 0.0;
  double ap_m = 0.0;
  double ap_l = 0.0;
  std::map<std::string, ClassMetrics> per_class;
  double mean_obj_nobj_cosine = 0.0;
  double text_retrieval_top1 = 0.0;
};

/// The 10 thresholds 0.50, 0.55, ..., 0.95.
std::vector<double> coco_iou_thresholds();

/// AP fields only. An AP over classes averages the classes that have ground
/// truth; a split with no ground truth at all reports 0.
EvalReport score_detections(std::span<const std::vector<Detection>> detections, const Dataset& dataset);

/// Row i counts when argmax_j S[i][j] == i, ties going to the lowest j.
double retrieval_top1(const Tensor& similarity);

struct EvalConfig {
  DecodeConfig decode;
  int batch_size = 16;
};

/// Eval-mode pass over the dataset; restores the model's previous mode.
EvalReport evaluate(Detector& model, const Dataset& dataset, const EvalConfig& config = {});

std::string report_to_json(const EvalReport& report, int indent = 2);
EvalReport report_from_json(const std::string& text);

/// Channel-mean |x| of one [C,h,w] slab, min-max scaled to 0..255 (all zero
/// when the range is zero) and nearest-upsampled by `factor`.
GrayImage activation_heatmap(std::span<const double> chw, int channels, int height, int width, int factor);

/// Writes `<image_id>_<level>_{obj|nobj}.pgm` for every image and decomposed
/// level; returns the written paths.
std::vector<std::filesystem::path> export_activation_maps(Detector& model, const Dataset& dataset,
                                                          const std::filesystem::path& out_dir, int batch_size = 16);

}  // namespace lgfd
