// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <set>

#include "lgfd/caption.hpp"
#include "lgfd/data.hpp"
#include "lgfd/error.hpp"
#include "test_util.hpp"

using namespace lgfd;
using lgfd::test::TempDir;
using lgfd::test::write_text;

namespace {

// Low noise and a mid background keep every object pixel inside (0, 1).
SceneSpec quiet_spec(int objects) {
  SceneSpec s = SceneSpec::defaults();
  s.background = 0.5;
  s.noise_amplitude = 0.15;
  s.min_objects = s.max_objects = objects;
  return s;
}

SceneSpec brighter(SceneSpec s, double by) {
  for (auto& c : s.categories) {
    c.min_delta += by;
    c.max_delta += by;
  }
  return s;
}

void write_pgm_file(const std::filesystem::path& p, int w, int h, std::uint8_t value) {
  GrayImage g{w, h, std::vector<std::uint8_t>(static_cast<std::size_t>(w * h), value)};
  write_pgm(p, g);
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("generate_scene: zero objects, determinism, pixel range") {
  SceneSpec s = SceneSpec::defaults();
  s.min_objects = s.max_objects = 0;
  CHECK(generate_scene(s, 3).boxes.empty());

  const SceneSpec d = SceneSpec::defaults();
  for (int i : {0, 1, 57}) {
    const auto a = generate_scene(d, i), b = generate_scene(d, i);
    CHECK(a.pixels == b.pixels);
    CHECK(a.boxes == b.boxes);
    CHECK(a.width == d.image_size);
    for (double v : a.pixels) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  CHECK(generate_scene(d, 0).pixels != generate_scene(d, 1).pixels);
}

TEST_CASE("generated boxes are tight to the pixels that received a delta") {
  // Raising every delta by 0.1 changes exactly the object pixels.
  for (int objects : {1, 3}) {
    const SceneSpec a = quiet_spec(objects), b = brighter(a, 0.1);
    for (int idx = 0; idx < 40; ++idx) {
      const auto ia = generate_scene(a, idx), ib = generate_scene(b, idx);
      REQUIRE(ia.boxes == ib.boxes);
      const int side = ia.width;
      std::vector<bool> changed(ia.pixels.size());
      for (std::size_t p = 0; p < changed.size(); ++p) changed[p] = ia.pixels[p] != ib.pixels[p];
      if (objects == 1 && !ia.boxes.empty()) {
        int x0 = side, y0 = side, x1 = -1, y1 = -1;
        for (int p = 0; p < side * side; ++p)
          if (changed[static_cast<std::size_t>(p)]) {
            x0 = std::min(x0, p % side);
            x1 = std::max(x1, p % side);
            y0 = std::min(y0, p / side);
            y1 = std::max(y1, p / side);
          }
        const BBox& bx = ia.boxes[0];
        CHECK(bx.x == x0);
        CHECK(bx.y == y0);
        CHECK(bx.w == x1 - x0 + 1);
        CHECK(bx.h == y1 - y0 + 1);
      }
      // Every changed pixel lies in some box; every box edge touches a changed pixel.
      for (int p = 0; p < side * side; ++p) {
        if (!changed[static_cast<std::size_t>(p)]) continue;
        const double px = p % side + 0.5, py = p / side + 0.5;
        CHECK(std::any_of(ia.boxes.begin(), ia.boxes.end(),
                          [&](const BBox& bx) { return px > bx.x && px < bx.x + bx.w && py > bx.y && py < bx.y + bx.h; }));
      }
      for (const BBox& bx : ia.boxes) {
        auto hit = [&](int x, int y) { return changed[static_cast<std::size_t>(y * side + x)]; };
        bool top = false, bottom = false, left = false, right = false;
        for (int x = static_cast<int>(bx.x); x < static_cast<int>(bx.x + bx.w); ++x) {
          top = top || hit(x, static_cast<int>(bx.y));
          bottom = bottom || hit(x, static_cast<int>(bx.y + bx.h) - 1);
        }
        for (int y = static_cast<int>(bx.y); y < static_cast<int>(bx.y + bx.h); ++y) {
          left = left || hit(static_cast<int>(bx.x), y);
          right = right || hit(static_cast<int>(bx.x + bx.w) - 1, y);
        }
        CHECK((top && bottom && left && right));
      }
    }
  }
}

TEST_CASE("generated boxes never overlap above IoU 0.3 and stay in the image") {
  const SceneSpec s = SceneSpec::defaults();
  for (int i = 0; i < 300; ++i) {
    const auto im = generate_scene(s, i);
    for (std::size_t a = 0; a < im.boxes.size(); ++a) {
      const BBox& b = im.boxes[a];
      CHECK(b.w > 0);
      CHECK(b.h > 0);
      CHECK(b.x >= 0);
      CHECK(b.y >= 0);
      CHECK(b.x + b.w <= im.width);
      CHECK(b.y + b.h <= im.height);
      for (std::size_t c = a + 1; c < im.boxes.size(); ++c) CHECK(iou(b, im.boxes[c]) <= kMaxPlacementIoU);
    }
  }
}

TEST_CASE("class balance over 500 scenes") {
  const SceneSpec s = SceneSpec::defaults();
  std::vector<int> counts(s.categories.size(), 0);
  int total = 0;
  for (int i = 0; i < 500; ++i)
    for (const auto& b : generate_scene(s, i).boxes) {
      ++counts[static_cast<std::size_t>(b.category_id)];
      ++total;
    }
  const double uniform = static_cast<double>(total) / static_cast<double>(counts.size());
  for (int c : counts) {
    CHECK(c >= 0.8 * uniform);
    CHECK(c <= 1.2 * uniform);
  }
}

TEST_CASE("SceneSpec validation") {
  SceneSpec s = SceneSpec::defaults();
  CHECK_NOTHROW(s.validate());
  CHECK(s.category_names() == std::vector<std::string>{"person", "car", "bicycle"});
  s.noise_amplitude = 0.05;  // 0.22 / 0.05 > 3
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = SceneSpec::defaults();
  s.min_objects = 4;
  s.max_objects = 2;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("load_coco minimal, zero width, clipping, errors") {
  TempDir dir("coco");
  std::filesystem::create_directories(dir / "img");
  write_pgm_file(dir / "img/a.pgm", 20, 10, 255);
  write_pgm_file(dir / "img/b.pgm", 20, 10, 51);
  write_text(dir / "ann.json", R"({"images":[{"id":5,"file_name":"a.pgm","width":20,"height":10},
      {"id":6,"file_name":"b.pgm","width":20,"height":10}],
    "annotations":[{"id":1,"image_id":5,"category_id":7,"bbox":[2,3,4,5]},
                   {"id":2,"image_id":5,"category_id":3,"bbox":[2,3,0,5]},
                   {"id":3,"image_id":6,"category_id":3,"bbox":[15,1,10,4]}],
    "categories":[{"id":7,"name":"car"},{"id":3,"name":"person"}]})");
  const auto r = load_coco(dir / "ann.json", dir / "img");
  CHECK(r.dropped_boxes == 1);
  CHECK(r.dataset.categories == std::vector<std::string>{"person", "car"});
  REQUIRE(r.dataset.images.size() == 2);
  const auto& a = r.dataset.images[0];
  CHECK(a.image_id == 5);
  REQUIRE(a.boxes.size() == 1);
  CHECK(a.boxes[0] == BBox{2, 3, 4, 5, 1});
  CHECK(a.pixels.size() == 200);
  CHECK(a.pixels[0] == 1.0);
  CHECK(r.dataset.images[1].pixels[7] == doctest::Approx(0.2));
  REQUIRE(r.dataset.images[1].boxes.size() == 1);
  CHECK(r.dataset.images[1].boxes[0] == BBox{15, 1, 5, 4, 0});

  write_text(dir / "bad.json", R"({"images": [ {"id": 1,, }]})");
  try {
    load_coco(dir / "bad.json", dir / "img");
    FAIL("expected a parse error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("byte") != std::string::npos);
  }
  write_text(dir / "missing.json", R"({"images":[{"id":42,"file_name":"nope.pgm","width":2,"height":2}],
      "annotations":[],"categories":[]})");
  try {
    load_coco(dir / "missing.json", dir / "img");
    FAIL("expected a missing image error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("42") != std::string::npos);
  }
  CHECK_NOTHROW(load_coco(dir / "missing.json", dir / "img", false));
}

TEST_CASE("export_coco round trip is exact") {
  TempDir dir("export");
  const Dataset ds = generate_dataset(SceneSpec::defaults(), 10, 6);
  export_coco(ds, dir.path());
  const auto r = load_coco(dir / "annotations.json", dir / "images");
  CHECK(r.dropped_boxes == 0);
  CHECK(r.dataset.categories == ds.categories);
  REQUIRE(r.dataset.images.size() == ds.images.size());
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    CHECK(r.dataset.images[i].image_id == ds.images[i].image_id);
    CHECK(r.dataset.images[i].pixels == ds.images[i].pixels);
    CHECK(r.dataset.images[i].boxes == ds.images[i].boxes);
  }
}

TEST_CASE("pgm reader accepts comments and rejects other formats") {
  TempDir dir("pgm");
  write_text(dir / "c.pgm", std::string("P5\n# comment\n2 1\n255\n") + char(10) + char(200));
  const auto g = read_pgm(dir / "c.pgm");
  CHECK(g.width == 2);
  CHECK(g.pixels == std::vector<std::uint8_t>{10, 200});
  write_text(dir / "p2.pgm", "P2\n1 1\n255\n3\n");
  CHECK_THROWS_AS(read_pgm(dir / "p2.pgm"), DataError);
  write_text(dir / "short.pgm", "P5\n4 4\n255\nab");
  CHECK_THROWS_AS(read_pgm(dir / "short.pgm"), DataError);
}

TEST_CASE("batching order, partial batch policy and captions") {
  const auto a = batch_indices(50, 16, 42, 0, true), b = batch_indices(50, 16, 42, 0, true);
  CHECK(a == b);
  CHECK(a.size() == 3);
  for (const auto& batch : a) CHECK(batch.size() == 16);
  CHECK(batch_indices(50, 16, 42, 1, true) != a);
  std::set<std::size_t> seen;
  for (const auto& batch : a) seen.insert(batch.begin(), batch.end());
  CHECK(seen.size() == 48);

  const auto full = batch_indices(50, 16, 42, 0, false);
  CHECK(full.size() == 4);
  CHECK(full.back().size() == 2);
  std::size_t next = 0;
  for (const auto& batch : full)
    for (auto i : batch) CHECK(i == next++);

  // Three items: epoch 0 and 1 permutations differ on seed 42.
  CHECK(batch_indices(3, 3, 42, 0, true) != batch_indices(3, 3, 42, 1, true));

  const Dataset ds = generate_dataset(SceneSpec::defaults(), 0, 5);
  const auto batches = make_batches(ds, 2, 42, 0, true);
  REQUIRE(batches.size() == 2);
  const auto& bt = batches[0];
  CHECK(bt.images.shape() == Shape{2, 1, 64, 64});
  CHECK(bt.captions.size() == 2);
  for (std::size_t k = 0; k < 2; ++k) {
    const auto& im = ds.images[static_cast<std::size_t>(bt.image_ids[k])];
    CHECK(bt.boxes[k] == im.boxes);
    CHECK(bt.captions[k] == generate_caption(im.boxes, im.width, im.height, ds.categories));
    CHECK(std::equal(im.pixels.begin(), im.pixels.end(), bt.images.data().begin() + static_cast<std::ptrdiff_t>(k * 4096)));
  }
}

}  // TEST_SUITE
