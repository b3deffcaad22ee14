// SPDX-License-Identifier: Apache-2.0
#include "lgfd/caption.hpp"

#include <array>
#include <cctype>
#include <cmath>
#include <map>

#include "lgfd/error.hpp"

namespace lgfd {

namespace {

constexpr std::array<const char*, 3> kRows = {"top", "middle", "bottom"};
constexpr std::array<const char*, 3> kCols = {"left", "center", "right"};
constexpr std::array<const char*, 10> kNumbers = {"one", "two", "three", "four", "five",
                                                   "six", "seven", "eight", "nine", "ten"};

int third(double v, double extent) {
  if (v <= extent / 3.0) return 0;
  if (v <= 2.0 * extent / 3.0) return 1;
  return 2;
}

}  // namespace

int spatial_bucket_index(const BBox& box, int image_w, int image_h) {
  const double cx = box.center_x();
  const double cy = box.center_y();
  if (!(cx >= 0.0 && cx <= image_w && cy >= 0.0 && cy <= image_h))
    throw DataError("box center (" + std::to_string(cx) + ", " + std::to_string(cy) + ") lies outside the " +
                    std::to_string(image_w) + "x" + std::to_string(image_h) + " image");
  return third(cy, image_h) * 3 + third(cx, image_w);
}

std::string spatial_bucket(const BBox& box, int image_w, int image_h) {
  const int idx = spatial_bucket_index(box, image_w, image_h);
  return std::string(kRows[static_cast<std::size_t>(idx / 3)]) + " " + kCols[static_cast<std::size_t>(idx % 3)];
}

std::string count_phrase(int n) {
  if (n < 1) throw DataError("count_phrase needs n >= 1, got " + std::to_string(n));
  if (n > 10) return "a large number of";
  return kNumbers[static_cast<std::size_t>(n - 1)];
}

std::string generate_caption(std::span<const BBox> boxes, int image_w, int image_h,
                             std::span<const std::string> categories) {
  if (boxes.empty()) return "an infrared image with no objects.";
  std::map<std::pair<int, int>, int> groups;  // (category, region) -> count, ordered
  for (const auto& b : boxes) {
    if (b.category_id < 0 || static_cast<std::size_t>(b.category_id) >= categories.size())
      throw DataError("category id " + std::to_string(b.category_id) + " missing from the category table");
    ++groups[{b.category_id, spatial_bucket_index(b, image_w, image_h)}];
  }
  std::string text = "an infrared image with ";
  bool first = true;
  for (const auto& [key, count] : groups) {
    if (!first) text += ", ";
    first = false;
    const auto& name = categories[static_cast<std::size_t>(key.first)];
    text += count_phrase(count) + " " + name + (count > 1 ? "s" : "") + " in the " + kRows[static_cast<std::size_t>(key.second / 3)] +
            " " + kCols[static_cast<std::size_t>(key.second % 3)];
  }
  return text + ".";
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

std::uint64_t fnv1a64(const std::string& s, std::uint64_t seed) {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ seed;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  // final avalanche so nearby strings spread over the low bits used for buckets
  h ^= h >> 33;
  h *= 0xff51afd7ed558ccdULL;
  h ^= h >> 33;
  return h;
}

HashTextEncoder::HashTextEncoder(int dim) : dim_(dim) {
  if (dim < 8) throw ConfigError("text encoder dimension must be >= 8, got " + std::to_string(dim));
}

int HashTextEncoder::bucket(const std::string& token) const {
  return static_cast<int>(fnv1a64(token, kBucketSeed) % static_cast<std::uint64_t>(dim_));
}

double HashTextEncoder::sign(const std::string& token) const {
  return (fnv1a64(token, kSignSeed) & 1U) ? 1.0 : -1.0;
}

std::vector<double> HashTextEncoder::encode(std::span<const std::string> tokens) const {
  std::vector<double> v(static_cast<std::size_t>(dim_), 0.0);
  for (const auto& t : tokens) v[static_cast<std::size_t>(bucket(t))] += sign(t);
  double ss = 0.0;
  for (double x : v) ss += x * x;
  if (ss == 0.0) {
    // empty input, or every word cancelled out
    std::fill(v.begin(), v.end(), 0.0);
    v[0] = 1.0;
    return v;
  }
  const double inv = 1.0 / std::sqrt(ss);
  for (double& x : v) x *= inv;
  return v;
}

CaptionRecord make_caption_record(std::span<const BBox> boxes, int image_w, int image_h,
                                  std::span<const std::string> categories, const TextEncoder& encoder) {
  CaptionRecord rec;
  rec.text = generate_caption(boxes, image_w, image_h, categories);
  rec.tokens = tokenize(rec.text);
  rec.embedding = encoder.encode(rec.tokens);
  return rec;
}

}  // namespace lgfd
