// SPDX-License-Identifier: Apache-2.0
#include "lgfd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "lgfd/caption.hpp"
#include "lgfd/error.hpp"
#include "lgfd/rng.hpp"

namespace lgfd {

namespace fs = std::filesystem;

int Dataset::image_size() const {
  if (images.empty()) throw DataError("dataset is empty");
  const int side = images.front().width;
  for (const auto& im : images)
    if (im.width != side || im.height != side)
      throw DataError("image " + std::to_string(im.image_id) + " is " + std::to_string(im.width) + "x" +
                      std::to_string(im.height) + "; all images must be square and " + std::to_string(side) + " wide");
  return side;
}

std::vector<SceneCategory> SceneSpec::default_categories(int image_size) {
  const double k = image_size / 64.0;
  return {
      {"person", ShapeFamily::kEllipse, 10.0 * k, 22.0 * k, 0.45, 0.08, 0.22},
      {"car", ShapeFamily::kRectangle, 6.0 * k, 12.0 * k, 1.8, 0.08, 0.22},
      {"bicycle", ShapeFamily::kEllipse, 5.0 * k, 9.0 * k, 1.2, 0.08, 0.22},
  };
}

SceneSpec SceneSpec::defaults() {
  SceneSpec s;
  s.categories = default_categories(s.image_size);
  return s;
}

std::vector<std::string> SceneSpec::category_names() const {
  std::vector<std::string> names;
  for (const auto& c : categories) names.push_back(c.name);
  return names;
}

void SceneSpec::validate() const {
  if (image_size < 8) throw ConfigError("data.image_size must be >= 8");
  if (categories.empty()) throw ConfigError("data.categories must not be empty");
  if (min_objects < 0 || max_objects < min_objects) throw ConfigError("data.min_objects/max_objects must satisfy 0 <= min <= max");
  if (!(background >= 0.0 && background <= 1.0)) throw ConfigError("data.background must lie in [0, 1]");
  if (!(noise_amplitude > 0.0)) throw ConfigError("data.noise_amplitude must be > 0");
  for (const auto& c : categories) {
    if (!(c.min_height > 0.0 && c.max_height >= c.min_height)) throw ConfigError("data category " + c.name + ": bad height range");
    if (!(c.aspect > 0.0)) throw ConfigError("data category " + c.name + ": aspect must be > 0");
    if (!(c.min_delta > 0.0 && c.max_delta >= c.min_delta)) throw ConfigError("data category " + c.name + ": bad delta range");
    if (c.max_delta / noise_amplitude > 3.0)
      throw ConfigError("data category " + c.name + ": delta / noise_amplitude exceeds 3 (task would not be low contrast)");
  }
}

namespace {

void box_blur3(std::vector<double>& img, int w, int h) {
  std::vector<double> out(img.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      int n = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          s += img[static_cast<std::size_t>(yy * w + xx)];
          ++n;
        }
      out[static_cast<std::size_t>(y * w + x)] = s / n;
    }
  img.swap(out);
}

// Pixels whose centers fall inside the shape.
std::vector<int> shape_mask(ShapeFamily shape, double cx, double cy, double bw, double bh, int side) {
  std::vector<int> cells;
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - bw / 2))), x1 = std::min(side - 1, static_cast<int>(std::ceil(cx + bw / 2)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - bh / 2))), y1 = std::min(side - 1, static_cast<int>(std::ceil(cy + bh / 2)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double px = x + 0.5 - cx, py = y + 0.5 - cy;
      bool inside = false;
      if (shape == ShapeFamily::kRectangle) {
        inside = px >= -bw / 2 && px < bw / 2 && py >= -bh / 2 && py < bh / 2;
      } else {
        const double u = px / (bw / 2), v = py / (bh / 2);
        inside = u * u + v * v <= 1.0;
      }
      if (inside) cells.push_back(y * side + x);
    }
  return cells;
}

BBox mask_box(const std::vector<int>& cells, int side, int category) {
  int x0 = side, y0 = side, x1 = -1, y1 = -1;
  for (int c : cells) {
    x0 = std::min(x0, c % side);
    x1 = std::max(x1, c % side);
    y0 = std::min(y0, c / side);
    y1 = std::max(y1, c / side);
  }
  return {static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x1 - x0 + 1),
          static_cast<double>(y1 - y0 + 1), category};
}

}  // namespace

AnnotatedImage generate_scene(const SceneSpec& spec, std::int64_t index) {
  spec.validate();
  Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(index)));
  const int side = spec.image_size;
  AnnotatedImage im;
  im.image_id = static_cast<int>(index);
  im.width = im.height = side;
  std::vector<double> px(static_cast<std::size_t>(side * side));
  for (auto& v : px) v = rng.uniform(-spec.noise_amplitude, spec.noise_amplitude);
  for (int p = 0; p < kBlurPasses; ++p) box_blur3(px, side, side);
  for (auto& v : px) v += spec.background;

  const int n = rng.range(spec.min_objects, spec.max_objects);
  for (int k = 0; k < n; ++k) {
    for (int attempt = 0; attempt <= kPlacementRetries; ++attempt) {
      const int cat = static_cast<int>(rng.below(spec.categories.size()));
      const SceneCategory& c = spec.categories[static_cast<std::size_t>(cat)];
      const double bh = std::min<double>(rng.uniform(c.min_height, c.max_height), side);
      const double bw = std::min<double>(bh * c.aspect, side);
      const double cx = rng.uniform(bw / 2, side - bw / 2);
      const double cy = rng.uniform(bh / 2, side - bh / 2);
      const double delta = rng.uniform(c.min_delta, c.max_delta);
      const auto cells = shape_mask(c.shape, cx, cy, bw, bh, side);
      if (cells.empty()) continue;
      const BBox box = mask_box(cells, side, cat);
      const bool clash = std::any_of(im.boxes.begin(), im.boxes.end(),
                                     [&](const BBox& o) { return iou(o, box) > kMaxPlacementIoU; });
      if (clash) continue;
      for (int cell : cells) px[static_cast<std::size_t>(cell)] += delta;
      im.boxes.push_back(box);
      break;
    }
  }
  for (auto& v : px) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  im.pixels = std::move(px);
  return im;
}

Dataset generate_dataset(const SceneSpec& spec, std::int64_t first_index, int count) {
  Dataset ds;
  ds.categories = spec.category_names();
  ds.images.reserve(static_cast<std::size_t>(std::max(count, 0)));
  for (int i = 0; i < count; ++i) ds.images.push_back(generate_scene(spec, first_index + i));
  return ds;
}

GrayImage to_gray(const AnnotatedImage& image) {
  GrayImage g{image.width, image.height, {}};
  g.pixels.reserve(image.pixels.size());
  for (double v : image.pixels) g.pixels.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  return g;
}

void write_pgm(const fs::path& path, const GrayImage& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw DataError("short write to " + path.string());
}

GrayImage read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path.string());
  auto token = [&]() {
    std::string t;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) return t;
      } else {
        t += ch;
      }
    }
    return t;
  };
  if (token() != "P5") throw DataError(path.string() + ": not a binary PGM (P5)");
  GrayImage g;
  int maxval = 0;
  try {
    g.width = std::stoi(token());
    g.height = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw DataError(path.string() + ": malformed PGM header");
  }
  if (g.width <= 0 || g.height <= 0) throw DataError(path.string() + ": non-positive PGM size");
  if (maxval != 255) throw DataError(path.string() + ": only 8-bit PGM (maxval 255) is supported");
  g.pixels.resize(static_cast<std::size_t>(g.width) * static_cast<std::size_t>(g.height));
  in.read(reinterpret_cast<char*>(g.pixels.data()), static_cast<std::streamsize>(g.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(g.pixels.size())) throw DataError(path.string() + ": truncated pixel data");
  return g;
}

CocoLoadResult load_coco(const fs::path& annotation_file, const fs::path& image_dir, bool load_pixels) {
  std::ifstream in(annotation_file);
  if (!in) throw DataError("cannot open annotation file " + annotation_file.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(annotation_file.string() + ": parse error at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  CocoLoadResult out;
  try {
    std::map<int, std::string> cats;
    for (const auto& c : doc.at("categories")) cats[c.at("id").get<int>()] = c.at("name").get<std::string>();
    std::map<int, int> cat_index;
    for (const auto& [id, name] : cats) {
      cat_index[id] = static_cast<int>(out.dataset.categories.size());
      out.dataset.categories.push_back(name);
    }
    std::map<int, std::size_t> by_id;
    for (const auto& jim : doc.at("images")) {
      AnnotatedImage im;
      im.image_id = jim.at("id").get<int>();
      if (load_pixels) {
        const fs::path file = image_dir / jim.at("file_name").get<std::string>();
        if (!fs::exists(file)) throw DataError("image " + std::to_string(im.image_id) + " not found at " + file.string());
        const GrayImage g = read_pgm(file);
        im.width = g.width;
        im.height = g.height;
        im.pixels.reserve(g.pixels.size());
        for (auto v : g.pixels) im.pixels.push_back(v / 255.0);
      } else {
        im.width = jim.at("width").get<int>();
        im.height = jim.at("height").get<int>();
      }
      if (!by_id.emplace(im.image_id, out.dataset.images.size()).second)
        throw DataError(annotation_file.string() + ": duplicate image id " + std::to_string(im.image_id));
      out.dataset.images.push_back(std::move(im));
    }
    for (const auto& a : doc.at("annotations")) {
      const int image_id = a.at("image_id").get<int>();
      const auto it = by_id.find(image_id);
      if (it == by_id.end()) throw DataError("annotation refers to missing image id " + std::to_string(image_id));
      const int cat_id = a.at("category_id").get<int>();
      const auto ct = cat_index.find(cat_id);
      if (ct == cat_index.end()) throw DataError("annotation refers to unknown category id " + std::to_string(cat_id));
      AnnotatedImage& im = out.dataset.images[it->second];
      const auto& bb = a.at("bbox");
      const double x = bb.at(0).get<double>(), y = bb.at(1).get<double>();
      const double x0 = std::clamp(x, 0.0, static_cast<double>(im.width));
      const double y0 = std::clamp(y, 0.0, static_cast<double>(im.height));
      const double x1 = std::clamp(x + bb.at(2).get<double>(), 0.0, static_cast<double>(im.width));
      const double y1 = std::clamp(y + bb.at(3).get<double>(), 0.0, static_cast<double>(im.height));
      if (!(x1 > x0 && y1 > y0)) {
        ++out.dropped_boxes;
        continue;
      }
      im.boxes.push_back({x0, y0, x1 - x0, y1 - y0, ct->second});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(annotation_file.string() + ": " + e.what());
  }
  return out;
}

void export_coco(const Dataset& dataset, const fs::path& dir) {
  fs::create_directories(dir / "images");
  nlohmann::ordered_json doc;
  doc["images"] = nlohmann::ordered_json::array();
  doc["annotations"] = nlohmann::ordered_json::array();
  doc["categories"] = nlohmann::ordered_json::array();
  int ann_id = 1;
  for (const auto& im : dataset.images) {
    char name[32];
    std::snprintf(name, sizeof name, "%06d.pgm", im.image_id);
    write_pgm(dir / "images" / name, to_gray(im));
    doc["images"].push_back({{"id", im.image_id}, {"file_name", name}, {"width", im.width}, {"height", im.height}});
    for (const auto& b : im.boxes)
      doc["annotations"].push_back({{"id", ann_id++},
                                    {"image_id", im.image_id},
                                    {"category_id", b.category_id + 1},
                                    {"bbox", {b.x, b.y, b.w, b.h}},
                                    {"area", b.area()},
                                    {"iscrowd", 0}});
  }
  for (std::size_t c = 0; c < dataset.categories.size(); ++c)
    doc["categories"].push_back({{"id", static_cast<int>(c) + 1}, {"name", dataset.categories[c]}});
  std::ofstream out(dir / "annotations.json", std::ios::binary);
  if (!out) throw DataError("cannot write " + (dir / "annotations.json").string());
  out << doc.dump(1) << '\n';
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, int batch_size, std::uint64_t seed, int epoch,
                                                    bool training) {
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (training) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  }
  std::vector<std::vector<std::size_t>> out;
  const auto B = static_cast<std::size_t>(batch_size);
  for (std::size_t start = 0; start < n; start += B) {
    if (start + B > n && training) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + B)));
  }
  return out;
}

Batch make_batch(const Dataset& dataset, std::span<const std::size_t> indices) {
  if (indices.empty()) throw DataError("make_batch: empty index list");
  const int side = dataset.images[indices[0]].width;
  const auto hw = static_cast<std::size_t>(side) * static_cast<std::size_t>(side);
  std::vector<double> data;
  data.reserve(indices.size() * hw);
  Batch b;
  for (std::size_t i : indices) {
    const AnnotatedImage& im = dataset.images.at(i);
    if (im.width != side || im.height != side) throw DataError("make_batch: image " + std::to_string(im.image_id) + " size differs");
    data.insert(data.end(), im.pixels.begin(), im.pixels.end());
    b.boxes.push_back(im.boxes);
    b.captions.push_back(generate_caption(im.boxes, im.width, im.height, dataset.categories));
    b.image_ids.push_back(im.image_id);
  }
  b.images = Tensor::from_data({static_cast<std::int64_t>(indices.size()), 1, side, side}, std::move(data));
  return b;
}

std::vector<Batch> make_batches(const Dataset& dataset, int batch_size, std::uint64_t seed, int epoch, bool training) {
  std::vector<Batch> out;
  for (const auto& idx : batch_indices(dataset.images.size(), batch_size, seed, epoch, training))
    out.push_back(make_batch(dataset, idx));
  return out;
}

}  // namespace lgfd
