// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lgfd/bbox.hpp"
#include "lgfd/tensor.hpp"

namespace lgfd {

/// Single-channel image in [0,1] with its boxes. Pixels are row-major [H,W].
struct AnnotatedImage {
  int image_id = 0;
  int width = 0;
  int height = 0;
  std::vector<double> pixels;
  std::vector<BBox> boxes;
};

struct Dataset {
  std::vector<std::string> categories;  // index == BBox::category_id
  std::vector<AnnotatedImage> images;
  int image_size() const;  // side of the (square) images; DataError otherwise
};

enum class ShapeFamily { kEllipse, kRectangle };

struct SceneCategory {
  std::string name;
  ShapeFamily shape = ShapeFamily::kEllipse;
  double min_height = 8.0;  // pixels
  double max_height = 16.0;
  double aspect = 1.0;  // width / height
  double min_delta = 0.1;
  double max_delta = 0.2;
};

struct SceneSpec {
  int image_size = 64;
  std::vector<SceneCategory> categories;
  int min_objects = 1;
  int max_objects = 6;
  double background = 0.35;
  double noise_amplitude = 0.5;  // white noise in [-a, a] before smoothing
  std::uint64_t seed = 7;

  /// Person (tall ellipse), car (wide rectangle), bicycle (small ellipse).
  static std::vector<SceneCategory> default_categories(int image_size);
  static SceneSpec defaults();
  std::vector<std::string> category_names() const;
  /// Throws ConfigError naming the key; enforces max_delta / noise_amplitude <= 3.
  void validate() const;
};

inline constexpr double kMaxPlacementIoU = 0.3;
inline constexpr int kPlacementRetries = 20;
inline constexpr int kBlurPasses = 3;

/// Pure function of (spec, index). Pixels are multiples of 1/255 so a PGM
/// export reloads exactly.
AnnotatedImage generate_scene(const SceneSpec& spec, std::int64_t index);
Dataset generate_dataset(const SceneSpec& spec, std::int64_t first_index, int count);

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;
};
void write_pgm(const std::filesystem::path& path, const GrayImage& image);
GrayImage read_pgm(const std::filesystem::path& path);
GrayImage to_gray(const AnnotatedImage& image);

struct CocoLoadResult {
  Dataset dataset;
  int dropped_boxes = 0;  // zero area after clipping
};

/// COCO-style annotations plus 8-bit PGM images. Category ids are remapped to
/// 0..C-1 in ascending id order. Without `load_pixels` only sizes and boxes
/// are read and `image_dir` is not touched.
CocoLoadResult load_coco(const std::filesystem::path& annotation_file, const std::filesystem::path& image_dir,
                         bool load_pixels = true);
/// Writes `<dir>/images/<id>.pgm` and `<dir>/annotations.json`; category ids
/// are written 1-based.
void export_coco(const Dataset& dataset, const std::filesystem::path& dir);

struct Batch {
  Tensor images;  // [B,1,H,W]
  std::vector<std::vector<BBox>> boxes;
  std::vector<std::string> captions;
  std::vector<int> image_ids;
};

/// Index order for one epoch. Training shuffles with (seed, epoch) and drops
/// the final partial batch; evaluation keeps dataset order and every image.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, int batch_size, std::uint64_t seed, int epoch,
                                                    bool training);
Batch make_batch(const Dataset& dataset, std::span<const std::size_t> indices);
std::vector<Batch> make_batches(const Dataset& dataset, int batch_size, std::uint64_t seed, int epoch, bool training);

}  // namespace lgfd
