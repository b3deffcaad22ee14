// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lgfd/bbox.hpp"

namespace lgfd {

/// Rule-based captions from box annotations.
///
/// A caption groups boxes by (category, region of a 3x3 grid keyed by the box
/// center) and emits one clause per group:
///
///   an infrared image with two cars in the middle center, one person in the top left.
///
/// Clauses are ordered by category id, then row-major region. Counts above ten
/// become "a large number of". Plurals append "s".

/// One of "top left" ... "bottom right". A center lying exactly on a grid line
/// belongs to the lower-index cell. Throws DataError if the center is outside
/// the image.
std::string spatial_bucket(const BBox& box, int image_w, int image_h);
/// Row-major index 0..8 of spatial_bucket().
int spatial_bucket_index(const BBox& box, int image_w, int image_h);

std::string count_phrase(int n);

std::string generate_caption(std::span<const BBox> boxes, int image_w, int image_h,
                             std::span<const std::string> categories);

/// Lowercases and splits on anything that is not a letter or digit.
std::vector<std::string> tokenize(const std::string& text);

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual int dim() const = 0;
  virtual std::vector<double> encode(std::span<const std::string> tokens) const = 0;
};

/// Signed feature hashing of a bag of words followed by L2 normalization.
/// An empty token list maps to the first basis vector.
class HashTextEncoder final : public TextEncoder {
 public:
  static constexpr std::uint64_t kBucketSeed = 0x4c47464400000011ULL;
  static constexpr std::uint64_t kSignSeed = 0x5349474e00000002ULL;

  explicit HashTextEncoder(int dim);
  int dim() const override { return dim_; }
  std::vector<double> encode(std::span<const std::string> tokens) const override;

  int bucket(const std::string& token) const;
  double sign(const std::string& token) const;

 private:
  int dim_;
};

std::uint64_t fnv1a64(const std::string& s, std::uint64_t seed);

struct CaptionRecord {
  std::string text;
  std::vector<std::string> tokens;
  std::vector<double> embedding;
};

CaptionRecord make_caption_record(std::span<const BBox> boxes, int image_w, int image_h,
                                  std::span<const std::string> categories, const TextEncoder& encoder);

}  // namespace lgfd
