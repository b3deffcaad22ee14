// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include "lgfd/caption.hpp"
#include "lgfd/error.hpp"
#include "lgfd/rng.hpp"

using namespace lgfd;

namespace {

const std::vector<std::string> kCats = {"person", "car", "bicycle"};
const std::vector<std::string> kRegions = {"top left",    "top center",    "top right",
                                           "middle left", "middle center", "middle right",
                                           "bottom left", "bottom center", "bottom right"};
const std::vector<std::string> kNumbers = {"one", "two", "three", "four", "five",
                                           "six", "seven", "eight", "nine", "ten"};

BBox centered(double cx, double cy, double w, double h, int cat) { return {cx - w / 2, cy - h / 2, w, h, cat}; }

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

std::vector<double> embed(const HashTextEncoder& enc, const std::string& text) {
  const auto toks = tokenize(text);
  return enc.encode(toks);
}

}  // namespace

TEST_SUITE("caption") {

TEST_CASE("spatial_bucket examples and boundary rule") {
  CHECK(spatial_bucket(centered(50, 50, 4, 4, 0), 100, 100) == "middle center");
  CHECK(spatial_bucket(centered(10, 10, 4, 4, 0), 100, 100) == "top left");
  CHECK(spatial_bucket(centered(90, 90, 4, 4, 0), 100, 100) == "bottom right");
  CHECK(spatial_bucket(centered(90, 10, 4, 4, 0), 100, 100) == "top right");
  // exactly on x = W/3 and y = 2H/3
  CHECK(spatial_bucket(centered(30, 60, 2, 2, 0), 90, 90) == "middle left");
  CHECK(spatial_bucket(centered(60, 30, 2, 2, 0), 90, 90) == "top center");
  CHECK(spatial_bucket(centered(0, 0, 0.5, 0.5, 0), 90, 90) == "top left");
  CHECK(spatial_bucket(centered(90, 90, 0.5, 0.5, 0), 90, 90) == "bottom right");
  CHECK_THROWS_AS(spatial_bucket(centered(95, 10, 2, 2, 0), 90, 90), DataError);
  CHECK_THROWS_AS(spatial_bucket(centered(10, -1, 1, 1, 0), 90, 90), DataError);
}

TEST_CASE("spatial_bucket agrees with a row/column oracle on random centers") {
  Rng rng(3);
  for (int t = 0; t < 2000; ++t) {
    const int W = rng.range(30, 200), H = rng.range(30, 200);
    const double cx = rng.uniform(0, W), cy = rng.uniform(0, H);
    int col = 0, row = 0;
    while (col < 2 && cx > W * (col + 1) / 3.0) ++col;
    while (row < 2 && cy > H * (row + 1) / 3.0) ++row;
    const BBox b = centered(cx, cy, 1, 1, 0);
    CHECK(spatial_bucket_index(b, W, H) == row * 3 + col);
    CHECK(spatial_bucket(b, W, H) == kRegions[static_cast<std::size_t>(row * 3 + col)]);
  }
}

TEST_CASE("count_phrase") {
  for (int n = 1; n <= 10; ++n) CHECK(count_phrase(n) == kNumbers[static_cast<std::size_t>(n - 1)]);
  CHECK(count_phrase(11) == "a large number of");
  CHECK(count_phrase(12) == "a large number of");
  CHECK(count_phrase(1000) == "a large number of");
  CHECK_THROWS(count_phrase(0));
  CHECK_THROWS(count_phrase(-3));
}

TEST_CASE("generate_caption examples") {
  CHECK(generate_caption({}, 90, 90, kCats) == "an infrared image with no objects.");
  const std::vector<BBox> one_car = {centered(45, 45, 10, 6, 1)};
  CHECK(generate_caption(one_car, 90, 90, kCats) == "an infrared image with one car in the middle center.");
  std::vector<BBox> crowd;
  for (int i = 0; i < 12; ++i) crowd.push_back(centered(5 + i, 10, 3, 6, 0));
  CHECK(generate_caption(crowd, 90, 90, kCats) == "an infrared image with a large number of persons in the top left.");
}

TEST_CASE("generate_caption orders clauses by category id then region") {
  const std::vector<BBox> boxes = {centered(80, 80, 4, 4, 2), centered(10, 80, 4, 4, 0), centered(80, 10, 4, 4, 1),
                                   centered(10, 10, 4, 4, 1), centered(82, 12, 4, 4, 1)};
  CHECK(generate_caption(boxes, 90, 90, kCats) ==
        "an infrared image with one person in the bottom left, one car in the top left, two cars in the top right, "
        "one bicycle in the bottom right.");
}

TEST_CASE("monotone quantifier: n and n+1 differ only in the count phrase") {
  for (int n = 1; n <= 10; ++n) {
    std::vector<BBox> a, b;
    for (int i = 0; i < n; ++i) a.push_back(centered(70 + i % 5, 70 + i / 5, 2, 2, 1));
    b = a;
    b.push_back(centered(75, 75, 2, 2, 1));
    const std::string ca = generate_caption(a, 90, 90, kCats), cb = generate_caption(b, 90, 90, kCats);
    const std::string noun_a = n == 1 ? "car" : "cars";
    CHECK(ca == "an infrared image with " + count_phrase(n) + " " + noun_a + " in the bottom right.");
    CHECK(cb == "an infrared image with " + count_phrase(n + 1) + " cars in the bottom right.");
  }
}

TEST_CASE("every present category is mentioned") {
  Rng rng(4);
  for (int t = 0; t < 300; ++t) {
    std::vector<BBox> boxes;
    std::set<int> present;
    const int n = rng.range(1, 25);
    for (int i = 0; i < n; ++i) {
      const int c = rng.range(0, 2);
      present.insert(c);
      boxes.push_back(centered(rng.uniform(1, 99), rng.uniform(1, 79), 1, 1, c));
    }
    const std::string cap = generate_caption(boxes, 100, 80, kCats);
    for (int c : present) CHECK(cap.find(kCats[static_cast<std::size_t>(c)]) != std::string::npos);
    CHECK(cap == generate_caption(boxes, 100, 80, kCats));
    CHECK(cap.back() == '.');
  }
}

TEST_CASE("tokenize") {
  CHECK(tokenize("One car.") == std::vector<std::string>{"one", "car"});
  CHECK(tokenize("").empty());
  CHECK(tokenize("  ,. ;").empty());
  CHECK(tokenize("Two cars, one PERSON.") == std::vector<std::string>{"two", "cars", "one", "person"});
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    std::vector<BBox> boxes;
    for (int i = rng.range(0, 14); i > 0; --i)
      boxes.push_back(centered(rng.uniform(1, 63), rng.uniform(1, 63), 1, 1, rng.range(0, 2)));
    const auto toks = tokenize(generate_caption(boxes, 64, 64, kCats));
    std::string joined;
    for (const auto& s : toks) joined += (joined.empty() ? "" : " ") + s;
    CHECK(tokenize(joined) == toks);
  }
}

TEST_CASE("hash encoder basics") {
  const HashTextEncoder enc(32);
  const std::vector<std::string> none;
  const auto e0 = enc.encode(none);
  REQUIRE(e0.size() == 32);
  CHECK(e0[0] == 1.0);
  for (std::size_t i = 1; i < e0.size(); ++i) CHECK(e0[i] == 0.0);

  const std::vector<std::string> toks = {"one", "car", "in", "the", "middle", "center"};
  const auto a = enc.encode(toks), b = enc.encode(toks);
  CHECK(a == b);
  CHECK(std::abs(norm(a) - 1.0) <= 1e-9);
  CHECK_THROWS_AS(HashTextEncoder(7), ConfigError);
}

TEST_CASE("hash encoder equals the normalized signed bucket count") {
  Rng rng(6);
  const std::vector<std::string> vocab = {"an", "infrared", "image", "with", "one", "two", "persons", "car", "left", "top"};
  for (int L : {8, 32, 64}) {
    const HashTextEncoder enc(L);
    for (int t = 0; t < 50; ++t) {
      std::vector<std::string> toks;
      for (int i = rng.range(1, 12); i > 0; --i) toks.push_back(vocab[rng.below(vocab.size())]);
      std::vector<double> ref(static_cast<std::size_t>(L), 0.0);
      for (const auto& w : toks) ref[static_cast<std::size_t>(enc.bucket(w))] += enc.sign(w);
      const double n = norm(ref);
      const auto e = enc.encode(toks);
      if (n == 0.0) continue;  // signed cancellation; covered by the norm check below
      for (int i = 0; i < L; ++i) CHECK(e[static_cast<std::size_t>(i)] == doctest::Approx(ref[static_cast<std::size_t>(i)] / n).epsilon(1e-12));
      CHECK(std::abs(norm(e) - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("caption vocabulary collision scan") {
  std::set<std::string> vocab = {"an", "infrared", "image", "with", "no", "objects", "in", "the", "a", "large", "number", "of",
                                 "top", "middle", "bottom", "left", "center", "right"};
  for (const auto& n : kNumbers) vocab.insert(n);
  for (const auto& c : kCats) {
    vocab.insert(c);
    vocab.insert(c + "s");
  }
  CHECK(vocab.size() <= 40);
  for (int L : {32, 64, 128}) {
    const HashTextEncoder enc(L);
    std::map<int, std::string> seen;
    for (const auto& c : kCats)
      for (const auto& w : {c, c + "s"}) {
        const int b = enc.bucket(w);
        INFO("L=" << L << " word=" << w);
        CHECK(seen.count(b) == 0);
        seen[b] = w;
      }
  }
  // Captions differing only in the category word are separated for every count and region.
  for (int L : {32, 64, 128}) {
    const HashTextEncoder enc(L);
    for (const auto& region : kRegions)
      for (int n = 1; n <= 11; ++n)
        for (std::size_t a = 0; a < kCats.size(); ++a)
          for (std::size_t b = a + 1; b < kCats.size(); ++b) {
            auto text = [&](const std::string& c) {
              return "an infrared image with " + count_phrase(n) + " " + c + (n > 1 ? "s" : "") + " in the " + region + ".";
            };
            const auto ea = embed(enc, text(kCats[a])), eb = embed(enc, text(kCats[b]));
            CHECK(dot(ea, eb) < 1.0 - 1e-6);
          }
  }
  // Disjoint category sets.
  const HashTextEncoder enc(32);
  const std::vector<BBox> p = {centered(10, 10, 2, 2, 0)}, cb = {centered(10, 10, 2, 2, 1), centered(50, 50, 2, 2, 2)};
  CHECK(embed(enc, generate_caption(p, 64, 64, kCats)) != embed(enc, generate_caption(cb, 64, 64, kCats)));
}

TEST_CASE("make_caption_record") {
  const HashTextEncoder enc(32);
  const std::vector<BBox> boxes = {centered(45, 45, 10, 6, 1)};
  const auto r = make_caption_record(boxes, 90, 90, kCats, enc);
  CHECK(r.text == "an infrared image with one car in the middle center.");
  CHECK(r.tokens == tokenize(r.text));
  CHECK(r.embedding == enc.encode(r.tokens));
  CHECK(std::abs(norm(r.embedding) - 1.0) <= 1e-9);
}

}  // TEST_SUITE
