// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <json.hpp>

#include <cstdlib>
#include <sys/wait.h>

#include "lgfd/data.hpp"
#include "lgfd/run_config.hpp"
#include "test_util.hpp"

using namespace lgfd;
using lgfd::test::read_text;
using lgfd::test::TempDir;
using lgfd::test::write_text;
namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = LGFD_FIXTURE_DIR;
const fs::path kConfig = kFixtures / "pipeline.ini";

struct Run {
  int code;
  std::string out;
};

Run lgfd_run(const std::string& args, const TempDir& dir) {
  const fs::path out = dir / "stdout.txt";
  const std::string cmd = std::string("\"") + LGFD_CLI_PATH + "\" " + args + " > \"" + out.string() + "\" 2> \"" +
                          (dir / "stderr.txt").string() + "\"";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_text(out)};
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

std::size_t count_files(const fs::path& dir, const std::string& ext) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == ext;
  return n;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("caption golden file") {
  TempDir dir("cli_caption");
  REQUIRE(lgfd_run("caption --annotations " + q(kFixtures / "captions/annotations.json") + " --out " + q(dir / "a.tsv"), dir).code == 0);
  REQUIRE(lgfd_run("caption --annotations " + q(kFixtures / "captions/annotations.json") + " --out " + q(dir / "b.tsv"), dir).code == 0);
  const std::string got = read_text(dir / "a.tsv");
  CHECK(got == read_text(kFixtures / "captions/golden.tsv"));
  CHECK(got == read_text(dir / "b.tsv"));
  CHECK(got.find("\tan infrared image with no objects.\n") != std::string::npos);
}

TEST_CASE("full pipeline on the fixture config") {
  TempDir dir("cli_pipeline");
  const fs::path data = dir / "data", data2 = dir / "data2", run = dir / "run";
  REQUIRE(lgfd_run("gen-data --config " + q(kConfig) + " --out " + q(data) + " --count 8", dir).code == 0);
  REQUIRE(lgfd_run("gen-data --config " + q(kConfig) + " --out " + q(data2) + " --count 8", dir).code == 0);
  CHECK(count_files(data / "images", ".pgm") == 8);
  CHECK(read_text(data / "annotations.json") == read_text(data2 / "annotations.json"));
  for (const auto& e : fs::directory_iterator(data / "images"))
    CHECK(read_text(e.path()) == read_text(data2 / "images" / e.path().filename()));

  const RunConfig cfg = load_run_config(kConfig);
  const Dataset ref = generate_dataset(cfg.data, 0, 8);
  const auto loaded = load_coco(data / "annotations.json", data / "images");
  REQUIRE(loaded.dataset.images.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) CHECK(loaded.dataset.images[i].boxes == ref.images[i].boxes);

  REQUIRE(lgfd_run("caption --annotations " + q(data / "annotations.json") + " --out " + q(dir / "cap.tsv"), dir).code == 0);
  const std::string tsv = read_text(dir / "cap.tsv");
  CHECK(std::count(tsv.begin(), tsv.end(), '\n') == 8);

  REQUIRE(lgfd_run("train --config " + q(kConfig) + " --data " + q(data) + " --run-dir " + q(run), dir).code == 0);
  const std::string metrics = read_text(run / "metrics.jsonl");
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 1);
  CHECK(fs::exists(run / "report.json"));
  CHECK(fs::exists(run / "ckpt_last.bin"));

  REQUIRE(lgfd_run("eval --ckpt " + q(run / "ckpt_last.bin") + " --data " + q(data) + " --out " + q(dir / "eval.json"), dir).code == 0);
  const auto report = nlohmann::json::parse(read_text(run / "report.json"));
  CHECK(nlohmann::json::parse(read_text(dir / "eval.json")) == report.at("final"));
  CHECK(report.at("config").get<std::string>() == serialize_run_config(cfg));

  REQUIRE(lgfd_run("heatmaps --ckpt " + q(run / "ckpt_last.bin") + " --data " + q(data) + " --out " + q(dir / "heat") + " --count 8", dir).code == 0);
  CHECK(count_files(dir / "heat", ".pgm") == 8 * 2 * 2);

  const Run ab = lgfd_run("ablate --config " + q(kConfig) + " --arms components --seeds 2 --epochs 1 --out " + q(dir / "abl"), dir);
  REQUIRE(ab.code == 0);
  for (const char* arm : {"baseline", "sfa_only", "ofd_only", "full"}) CHECK(ab.out.find(arm) != std::string::npos);
  CHECK(read_text(dir / "abl/ablation.txt") == ab.out);
  CHECK(nlohmann::json::parse(read_text(dir / "abl/ablation.json")).size() == 4);
}

TEST_CASE("exit codes") {
  TempDir dir("cli_exit");
  CHECK(lgfd_run("--help", dir).code == 0);
  CHECK(lgfd_run("train --bogus-flag", dir).code == 1);
  CHECK(lgfd_run("eval --ckpt " + q(dir / "missing.bin"), dir).code == 1);
  CHECK(read_text(dir / "stderr.txt").find("missing.bin") != std::string::npos);
  CHECK(lgfd_run("gradcheck --samples 5", dir).code == 1);

  write_text(dir / "bad.ini", "[train]\nlearning_rate = 0.1\n");
  CHECK(lgfd_run("train --config " + q(dir / "bad.ini") + " --run-dir " + q(dir / "r"), dir).code == 1);
  CHECK(read_text(dir / "stderr.txt").find("learning_rate") != std::string::npos);

  write_text(dir / "nan.ini", read_text(kConfig) + "lr = 1e300\nepochs = 4\n");  // appended to [eval]
  CHECK(lgfd_run("train --config " + q(dir / "nan.ini") + " --run-dir " + q(dir / "r"), dir).code == 1);
  std::string text = read_text(kConfig);
  text.replace(text.find("[train]\n"), 8, "[train]\nlr = 1e300\n");
  write_text(dir / "nan2.ini", text);
  CHECK(lgfd_run("train --config " + q(dir / "nan2.ini") + " --epochs 4 --run-dir " + q(dir / "r2"), dir).code == 2);
}

TEST_CASE("help lists every flag of every subcommand") {
  TempDir dir("cli_help");
  const std::vector<std::pair<std::string, std::vector<std::string>>> cmds = {
      {"gen-data", {"--config", "--out", "--count", "--split"}},
      {"caption", {"--annotations", "--out"}},
      {"train", {"--config", "--data", "--eval-data", "--run-dir", "--epochs", "--seed"}},
      {"eval", {"--ckpt", "--data", "--out"}},
      {"ablate", {"--config", "--arms", "--seeds", "--epochs", "--jobs", "--out"}},
      {"gradcheck", {"--config", "--samples"}},
      {"heatmaps", {"--ckpt", "--data", "--out", "--count"}}};
  for (const auto& [cmd, flags] : cmds) {
    const Run r = lgfd_run(cmd + " --help", dir);
    CHECK(r.code == 0);
    for (const auto& f : flags) {
      INFO(cmd << " " << f);
      CHECK(r.out.find(f) != std::string::npos);
    }
  }
}

}  // TEST_SUITE
