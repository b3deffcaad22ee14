// SPDX-License-Identifier: Apache-2.0
#include "lgfd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "lgfd/error.hpp"
#include "lgfd/losses.hpp"

namespace lgfd {

namespace fs = std::filesystem;

namespace {
double sigm(double z) { return 1.0 / (1.0 + std::exp(-z)); }

void sort_by_score(std::vector<Detection>& dets) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
}
}  // namespace

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh) {
  sort_by_score(dets);
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    const bool suppressed =
        std::any_of(kept.begin(), kept.end(), [&](const Detection& k) { return iou(k.box, d.box) > iou_thresh; });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

std::vector<std::vector<Detection>> decode(const DensePrediction& pred, int image_size, const DecodeConfig& config) {
  const std::int64_t B = pred.levels[0].objectness.dim(0);
  const std::int64_t C = pred.levels[0].cls.dim(1);
  const double side = image_size;
  std::vector<std::vector<Detection>> out(static_cast<std::size_t>(B));
  for (std::int64_t b = 0; b < B; ++b) {
    std::vector<std::vector<Detection>> per_class(static_cast<std::size_t>(C));
    for (const auto& lv : pred.levels) {
      const std::int64_t h = lv.objectness.dim(2), w = lv.objectness.dim(3), hw = h * w;
      const auto obj = lv.objectness.data();
      const auto cls = lv.cls.data();
      const auto box = lv.box.data();
      for (std::int64_t i = 0; i < h; ++i)
        for (std::int64_t j = 0; j < w; ++j) {
          const std::int64_t s = i * w + j;
          const double po = sigm(obj[static_cast<std::size_t>(b * hw + s)]);
          if (po <= config.score_thresh) continue;
          auto reg = [&](int k) { return box[static_cast<std::size_t>((b * 4 + k) * hw + s)]; };
          const double cx = (static_cast<double>(j) + sigm(reg(0))) * lv.stride;
          const double cy = (static_cast<double>(i) + sigm(reg(1))) * lv.stride;
          const double bw = lv.prior * std::exp(std::min(reg(2), 10.0));
          const double bh = lv.prior * std::exp(std::min(reg(3), 10.0));
          const double x0 = std::clamp(cx - bw / 2, 0.0, side), x1 = std::clamp(cx + bw / 2, 0.0, side);
          const double y0 = std::clamp(cy - bh / 2, 0.0, side), y1 = std::clamp(cy + bh / 2, 0.0, side);
          if (!(x1 > x0 && y1 > y0)) continue;
          for (std::int64_t k = 0; k < C; ++k) {
            const double score = po * sigm(cls[static_cast<std::size_t>((b * C + k) * hw + s)]);
            if (score <= config.score_thresh) continue;
            const int cat = static_cast<int>(k);
            per_class[static_cast<std::size_t>(k)].push_back({{x0, y0, x1 - x0, y1 - y0, cat}, cat, score});
          }
        }
    }
    auto& dets = out[static_cast<std::size_t>(b)];
    for (auto& pc : per_class) {
      auto kept = nms(std::move(pc), config.nms_iou);
      dets.insert(dets.end(), kept.begin(), kept.end());
    }
    sort_by_score(dets);
    if (static_cast<int>(dets.size()) > config.max_detections) dets.resize(static_cast<std::size_t>(config.max_detections));
  }
  return out;
}

std::optional<double> average_precision(std::span<const std::vector<Detection>> detections,
                                        std::span<const std::vector<BBox>> ground_truth, double iou_thresh,
                                        const AreaRange& range) {
  if (detections.size() != ground_truth.size())
    throw ShapeError("average_precision: " + std::to_string(detections.size()) + " detection lists for " +
                     std::to_string(ground_truth.size()) + " images");
  struct Scored {
    double score;
    bool tp;
  };
  std::vector<Scored> scored;
  int npos = 0;
  for (std::size_t im = 0; im < detections.size(); ++im) {
    // Counted ground truth first so a match prefers it over an ignored box.
    std::vector<BBox> gts;
    std::vector<bool> ignored;
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& g : ground_truth[im])
        if (range.contains(g.area()) == (pass == 0)) {
          gts.push_back(g);
          ignored.push_back(pass == 1);
        }
    npos += static_cast<int>(std::count(ignored.begin(), ignored.end(), false));

    std::vector<Detection> dets = detections[im];
    sort_by_score(dets);
    std::vector<bool> matched(gts.size(), false);
    for (const auto& d : dets) {
      int best = -1;
      double best_iou = 0.0;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (matched[g]) continue;
        if (best >= 0 && !ignored[static_cast<std::size_t>(best)] && ignored[g]) break;
        const double v = iou(d.box, gts[g]);
        if (v < iou_thresh) continue;
        if (best < 0 || v > best_iou) {
          best = static_cast<int>(g);
          best_iou = v;
        }
      }
      if (best >= 0) {
        matched[static_cast<std::size_t>(best)] = true;
        if (!ignored[static_cast<std::size_t>(best)]) scored.push_back({d.score, true});
      } else if (range.contains(d.box.area())) {
        scored.push_back({d.score, false});
      }
    }
  }
  if (npos == 0) return std::nullopt;
  std::stable_sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });
  std::vector<double> precision;
  int tp = 0, fp = 0;
  for (const auto& s : scored) {
    (s.tp ? tp : fp) += 1;
    precision.push_back(static_cast<double>(tp) / (tp + fp));
  }
  for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  // Recall rises by 1/npos at each true positive; summing first keeps a perfect ranking at exactly 1.
  double ap = 0.0;
  for (std::size_t k = 0; k < scored.size(); ++k)
    if (scored[k].tp) ap += precision[k];
  ap /= npos;
  return ap;
}

std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int k = 0; k < 10; ++k) t.push_back((50 + 5 * k) / 100.0);
  return t;
}

EvalReport score_detections(std::span<const std::vector<Detection>> detections, const Dataset& dataset) {
  if (detections.size() != dataset.images.size())
    throw ShapeError("score_detections: " + std::to_string(detections.size()) + " detection lists for " +
                     std::to_string(dataset.images.size()) + " images");
  const auto thresholds = coco_iou_thresholds();
  const std::array<AreaRange, 3> splits = {AreaRange{0.0, kSmallArea}, AreaRange{kSmallArea, kMediumArea},
                                           AreaRange{kMediumArea, std::numeric_limits<double>::infinity()}};
  EvalReport r;
  double sum_map = 0.0, sum50 = 0.0, sum75 = 0.0;
  int scored_classes = 0;
  std::array<double, 3> split_sum{};
  std::array<int, 3> split_n{};
  const std::size_t n = dataset.images.size();
  for (std::size_t c = 0; c < dataset.categories.size(); ++c) {
    const int cat = static_cast<int>(c);
    std::vector<std::vector<Detection>> dets(n);
    std::vector<std::vector<BBox>> gts(n);
    int gt_count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (const auto& d : detections[i])
        if (d.category_id == cat) dets[i].push_back(d);
      for (const auto& g : dataset.images[i].boxes)
        if (g.category_id == cat) gts[i].push_back(g);
      gt_count += static_cast<int>(gts[i].size());
    }
    ClassMetrics cm;
    cm.gt_count = gt_count;
    if (gt_count == 0) {
      r.per_class[dataset.categories[c]] = cm;
      continue;
    }
    for (double t : thresholds) {
      const double ap = *average_precision(dets, gts, t);
      cm.map += ap;
      if (t == 0.5) cm.ap50 = ap;
      if (t == 0.75) sum75 += ap;
    }
    cm.map /= static_cast<double>(thresholds.size());
    for (std::size_t s = 0; s < splits.size(); ++s) {
      double acc = 0.0;
      bool any = false;
      for (double t : thresholds)
        if (auto ap = average_precision(dets, gts, t, splits[s])) {
          acc += *ap;
          any = true;
        }
      if (any) {
        split_sum[s] += acc / static_cast<double>(thresholds.size());
        ++split_n[s];
      }
    }
    sum_map += cm.map;
    sum50 += cm.ap50;
    ++scored_classes;
    r.per_class[dataset.categories[c]] = cm;
  }
  if (scored_classes > 0) {
    r.map = sum_map / scored_classes;
    r.ap50 = sum50 / scored_classes;
    r.ap75 = sum75 / scored_classes;
  }
  r.ap_s = split_n[0] ? split_sum[0] / split_n[0] : 0.0;
  r.ap_m = split_n[1] ? split_sum[1] / split_n[1] : 0.0;
  r.ap_l = split_n[2] ? split_sum[2] / split_n[2] : 0.0;
  return r;
}

double retrieval_top1(const Tensor& similarity) {
  if (similarity.ndim() != 2 || similarity.dim(0) != similarity.dim(1))
    throw ShapeError("retrieval_top1: similarity must be square, got " + shape_str(similarity.shape()));
  const std::int64_t b = similarity.dim(0);
  const auto s = similarity.data();
  int hits = 0;
  for (std::int64_t i = 0; i < b; ++i) {
    std::int64_t arg = 0;
    for (std::int64_t j = 1; j < b; ++j)
      if (s[static_cast<std::size_t>(i * b + j)] > s[static_cast<std::size_t>(i * b + arg)]) arg = j;
    hits += arg == i;
  }
  return static_cast<double>(hits) / static_cast<double>(b);
}

namespace {
struct ModeRestore {
  Detector& model;
  bool previous;
  explicit ModeRestore(Detector& m) : model(m), previous(m.training()) { m.set_training(false); }
  ~ModeRestore() { model.set_training(previous); }
};
}  // namespace

EvalReport evaluate(Detector& model, const Dataset& dataset, const EvalConfig& config) {
  if (dataset.images.empty()) throw DataError("evaluate: empty dataset");
  const int side = dataset.image_size();
  if (side != model.config().image_size)
    throw ConfigError("evaluate: dataset images are " + std::to_string(side) + " px but model.image_size is " +
                      std::to_string(model.config().image_size));
  ModeRestore mode(model);
  NoGradGuard no_grad;
  std::vector<std::vector<Detection>> detections;
  double cos_sum = 0.0, hit_sum = 0.0;
  for (const auto& idx : batch_indices(dataset.images.size(), config.batch_size, 0, 0, false)) {
    const Batch batch = make_batch(dataset, idx);
    const auto b = static_cast<double>(idx.size());
    // The train-path forward in eval mode yields the same predictions as
    // forward_infer plus the embeddings needed for the diagnostics.
    const TrainOutputs out = model.forward_train(batch.images, batch.captions);
    auto dets = decode(out.prediction, side, config.decode);
    detections.insert(detections.end(), std::make_move_iterator(dets.begin()), std::make_move_iterator(dets.end()));
    if (!out.decomposed.empty()) cos_sum += disentangle_loss(out.decomposed).item() * b;
    if (out.object_embedding.defined())
      hit_sum += retrieval_top1(similarity_matrix(out.object_embedding, out.text_embedding)) * b;
  }
  EvalReport r = score_detections(detections, dataset);
  const auto n = static_cast<double>(dataset.images.size());
  r.mean_obj_nobj_cosine = cos_sum / n;
  r.text_retrieval_top1 = hit_sum / n;
  return r;
}

std::string report_to_json(const EvalReport& r, int indent) {
  nlohmann::ordered_json j;
  j["map"] = r.map;
  j["ap50"] = r.ap50;
  j["ap75"] = r.ap75;
  j["ap_s"] = r.ap_s;
  j["ap_m"] = r.ap_m;
  j["ap_l"] = r.ap_l;
  j["per_class"] = nlohmann::ordered_json::object();
  for (const auto& [name, cm] : r.per_class)
    j["per_class"][name] = {{"ap50", cm.ap50}, {"map", cm.map}, {"gt_count", cm.gt_count}};
  j["mean_obj_nobj_cosine"] = r.mean_obj_nobj_cosine;
  j["text_retrieval_top1"] = r.text_retrieval_top1;
  return j.dump(indent);
}

EvalReport report_from_json(const std::string& text) {
  EvalReport r;
  try {
    const auto j = nlohmann::json::parse(text);
    r.map = j.at("map");
    r.ap50 = j.at("ap50");
    r.ap75 = j.at("ap75");
    r.ap_s = j.at("ap_s");
    r.ap_m = j.at("ap_m");
    r.ap_l = j.at("ap_l");
    for (const auto& [name, v] : j.at("per_class").items())
      r.per_class[name] = {v.at("ap50").get<double>(), v.at("map").get<double>(), v.at("gt_count").get<int>()};
    r.mean_obj_nobj_cosine = j.at("mean_obj_nobj_cosine");
    r.text_retrieval_top1 = j.at("text_retrieval_top1");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("eval report: ") + e.what());
  }
  return r;
}

GrayImage activation_heatmap(std::span<const double> chw, int channels, int height, int width, int factor) {
  const auto hw = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  if (chw.size() != hw * static_cast<std::size_t>(channels)) throw ShapeError("activation_heatmap: slab size mismatch");
  std::vector<double> m(hw, 0.0);
  for (int c = 0; c < channels; ++c)
    for (std::size_t p = 0; p < hw; ++p) m[p] += std::abs(chw[static_cast<std::size_t>(c) * hw + p]) / channels;
  const auto [lo, hi] = std::minmax_element(m.begin(), m.end());
  const double lo_v = *lo, range = *hi - *lo;
  GrayImage g{width * factor, height * factor, {}};
  g.pixels.resize(static_cast<std::size_t>(g.width) * static_cast<std::size_t>(g.height), 0);
  for (int y = 0; y < g.height; ++y)
    for (int x = 0; x < g.width; ++x) {
      const double v = m[static_cast<std::size_t>((y / factor) * width + x / factor)];
      g.pixels[static_cast<std::size_t>(y * g.width + x)] =
          range > 0.0 ? static_cast<std::uint8_t>(std::lround(255.0 * (v - lo_v) / range)) : 0;
    }
  return g;
}

std::vector<fs::path> export_activation_maps(Detector& model, const Dataset& dataset, const fs::path& out_dir,
                                             int batch_size) {
  fs::create_directories(out_dir);
  ModeRestore mode(model);
  NoGradGuard no_grad;
  std::vector<fs::path> written;
  const int side = dataset.image_size();
  for (const auto& idx : batch_indices(dataset.images.size(), batch_size, 0, 0, false)) {
    const Batch batch = make_batch(dataset, idx);
    const PyramidFeatures pyramid = model.fpn_forward(model.backbone_forward(batch.images));
    for (int l = 0; l < kNumLevels; ++l) {
      const auto level = static_cast<Level>(l);
      if (!model.config().decomposed(level)) continue;
      const DecomposedLevel d = model.decompose(pyramid.at(level), level);
      for (const auto& [tag, t] : {std::pair<const char*, const Tensor*>{"obj", &d.f_obj}, {"nobj", &d.f_nobj}}) {
        const auto C = static_cast<int>(t->dim(1)), h = static_cast<int>(t->dim(2)), w = static_cast<int>(t->dim(3));
        const auto slab = static_cast<std::size_t>(C) * static_cast<std::size_t>(h * w);
        for (std::size_t b = 0; b < idx.size(); ++b) {
          const GrayImage g = activation_heatmap(t->data().subspan(b * slab, slab), C, h, w, side / h);
          const fs::path p = out_dir / (std::to_string(batch.image_ids[b]) + "_" + level_name(level) + "_" + tag + ".pgm");
          write_pgm(p, g);
          written.push_back(p);
        }
      }
    }
  }
  return written;
}

}  // namespace lgfd
