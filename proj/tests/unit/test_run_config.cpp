// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <charconv>

#include "lgfd/error.hpp"
#include "lgfd/rng.hpp"
#include "lgfd/run_config.hpp"

using namespace lgfd;

namespace {

std::string error_of(const std::string& text) {
  try {
    parse_run_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_SUITE("run_config") {

TEST_CASE("empty document gives the defaults") {
  const RunConfig c = parse_run_config("");
  RunConfig d;
  d.resolve();
  CHECK(serialize_run_config(c) == serialize_run_config(d));
  CHECK(c.train.seed == 42);
  CHECK(c.train.batch_size == 16);
  CHECK(c.train.epochs == 60);
  CHECK(c.train.seeds == 5);
  CHECK(c.train_count == 1000);
  CHECK(c.eval_count == 200);
  CHECK(c.model.L == 32);
  CHECK(c.model.num_classes == 3);
  CHECK(c.model.image_size == c.data.image_size);
}

TEST_CASE("serialization is canonical and idempotent") {
  const std::string text = R"([data]
image_size = 32
train_count = 12
category.blob = rectangle 3 5 1.5 0.1 0.2
category.dot = ellipse 2 4 1 0.05 0.15
[model]
L = 16
decompose = p3,p5
ratio = 0.25
cbr = 3x3x2
head_input = concat
priors = 4 12 28
[loss]
tau = 0.1
alpha = 0.5
symmetric_al = true
[train]
lr = 0.005
seed = 7
[eval]
score_thresh = 0.1
)";
  const RunConfig c = parse_run_config(text);
  CHECK(c.data.categories.size() == 2);
  CHECK(c.data.categories[0].name == "blob");
  CHECK(c.data.categories[0].shape == ShapeFamily::kRectangle);
  CHECK(c.model.num_classes == 2);
  CHECK(c.model.decompose == std::array<bool, 3>{true, false, true});
  CHECK(c.model.cbr == CbrKind::k3x3x2);
  CHECK(c.model.head_input == HeadInput::kConcat);
  CHECK(c.loss.symmetric_al);
  CHECK(c.eval.decode.score_thresh == 0.1);
  const std::string s1 = serialize_run_config(c);
  const std::string s2 = serialize_run_config(parse_run_config(s1));
  CHECK(s1 == s2);

  const RunConfig none = parse_run_config("[model]\ndecompose = none\n");
  CHECK(none.model.decompose == std::array<bool, 3>{false, false, false});
  CHECK(serialize_run_config(parse_run_config(serialize_run_config(none))) == serialize_run_config(none));
}

TEST_CASE("errors name the offending key") {
  CHECK(error_of("[model]\nwidth = 3\n").find("width") != std::string::npos);
  CHECK(error_of("[optimizer]\nlr = 1\n").find("optimizer") != std::string::npos);
  CHECK(error_of("[train]\nbatch_size = 1\n").find("batch_size") != std::string::npos);
  CHECK(error_of("[train]\nlr = fast\n").find("lr") != std::string::npos);
  CHECK(error_of("[model]\nheads = 3\n").find("heads") != std::string::npos);
  CHECK(error_of("[model]\ndecompose = p6\n").find("decompose") != std::string::npos);
  CHECK(error_of("[loss]\ntau = 0\n").find("tau") != std::string::npos);
  CHECK_FALSE(error_of("[data]\ncategory.x = hexagon 1 2 1 0.1 0.1\n").empty());
}

TEST_CASE("format_double is the shortest exact round trip") {
  CHECK(format_double(0.1) == "0.1");
  CHECK(format_double(1.0) == "1");
  CHECK(format_double(-2.5e-7) == "-2.5e-07");
  Rng rng(1);
  for (int t = 0; t < 1000; ++t) {
    const double v = (rng.uniform() - 0.5) * std::pow(10.0, rng.range(-20, 20));
    const std::string s = format_double(v);
    double back = 0.0;
    std::from_chars(s.data(), s.data() + s.size(), back);
    CHECK(back == v);
  }
}

}  // TEST_SUITE
