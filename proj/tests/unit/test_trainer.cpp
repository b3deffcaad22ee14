// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <sstream>

#include "lgfd/checkpoint.hpp"
#include "lgfd/error.hpp"
#include "lgfd/losses.hpp"
#include "lgfd/trainer.hpp"
#include "test_util.hpp"

using namespace lgfd;
using lgfd::test::bit_equal;
using lgfd::test::read_text;
using lgfd::test::TempDir;

namespace {

RunConfig tiny(int train_count = 4, int epochs = 1) {
  RunConfig c;
  c.train_count = train_count;
  c.eval_count = 4;
  c.model.L = 8;
  c.train.epochs = epochs;
  c.train.batch_size = 2;
  c.train.seeds = 1;
  c.resolve();
  return c;
}

std::vector<std::string> row_lines(const RunRecord& r) {
  std::vector<std::string> v;
  for (const auto& row : r.rows) v.push_back(epoch_row_json(row));
  return v;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("one epoch on four images: one row and a bit-exact checkpoint") {
  TempDir dir("train");
  const RunConfig cfg = tiny();
  const auto res = train(cfg, make_train_set(cfg), make_eval_set(cfg), dir.path());
  CHECK(res.record.rows.size() == 1);
  CHECK(res.record.rows[0].epoch == 1);
  REQUIRE(res.record.rows[0].eval.has_value());
  for (const char* f : {"metrics.jsonl", "report.json", "ckpt_last.bin"}) CHECK(std::filesystem::exists(dir / f));
  const std::string metrics = read_text(dir / "metrics.jsonl");
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 1);

  const Checkpoint ck = read_checkpoint(dir / "ckpt_last.bin");
  CHECK(ck.config_text == serialize_run_config(cfg));
  const auto all = res.model->parameters().all();
  REQUIRE(ck.entries.size() == all.size());
  for (std::size_t i = 0; i < all.size(); ++i) {
    CHECK(ck.entries[i].name == all[i].name);
    CHECK(bit_equal(ck.entries[i].values, all[i].tensor.data()));
  }

  RunConfig loaded_cfg;
  const auto loaded = load_model(dir / "ckpt_last.bin", &loaded_cfg);
  CHECK(serialize_run_config(loaded_cfg) == serialize_run_config(cfg));
  const auto reloaded = loaded->parameters().all();
  for (std::size_t i = 0; i < all.size(); ++i) CHECK(bit_equal(reloaded[i].tensor.data(), all[i].tensor.data()));

  // Saving the reloaded model writes the same bytes.
  save_checkpoint(dir / "again.bin", loaded->parameters(), serialize_run_config(loaded_cfg));
  CHECK(read_text(dir / "again.bin") == read_text(dir / "ckpt_last.bin"));
}

TEST_CASE("replay from the config snapshot reproduces the losses bit-exactly") {
  const RunConfig cfg = tiny(6, 2);
  const auto a = train(cfg, make_train_set(cfg), make_eval_set(cfg));
  const RunConfig replay = parse_run_config(a.record.config_text);
  const auto b = train(replay, make_train_set(replay), make_eval_set(replay));
  CHECK(row_lines(a.record) == row_lines(b.record));
  CHECK(run_report_json(a.record) == run_report_json(b.record));
}

TEST_CASE("baseline and full arms diverge after one step") {
  RunConfig full = tiny(2, 1), base = full;
  base.loss.alpha = base.loss.beta = 0.0;
  const auto a = train(full, make_train_set(full), make_eval_set(full));
  const auto b = train(base, make_train_set(base), make_eval_set(base));
  const Parameter* pa = a.model->parameters().find("backbone.stem.conv.weight");
  const Parameter* pb = b.model->parameters().find("backbone.stem.conv.weight");
  REQUIRE(pa);
  REQUIRE(pb);
  CHECK_FALSE(bit_equal(pa->tensor.data(), pb->tensor.data()));
  // The detection head sees neither auxiliary loss, but its input changes only after the step.
  CHECK(a.record.rows[0].l_det == b.record.rows[0].l_det);
}

TEST_CASE("with beta = 0 the non-object half receives only zero gradient") {
  RunConfig cfg = tiny();
  cfg.loss.beta = 0.0;
  Detector m(cfg.model, 1);
  const Dataset ds = make_train_set(cfg);
  const Batch batch = make_batches(ds, 2, 42, 0, true)[0];
  const auto out = m.forward_train(batch.images, batch.captions);
  backward(compute_losses(out, assign_targets(batch.boxes, cfg.model.image_size, cfg.model.priors), cfg.loss).total);
  for (const auto& d : out.decomposed)
    for (double g : d.f_nobj.grad()) CHECK(g == 0.0);
}

TEST_CASE("a non-finite loss aborts with the epoch and batch") {
  RunConfig cfg = tiny(8, 3);
  cfg.train.lr = 1e300;
  try {
    train(cfg, make_train_set(cfg), make_eval_set(cfg));
    FAIL("expected TrainingAborted");
  } catch (const TrainingAborted& e) {
    CHECK(e.epoch() >= 1);
    CHECK(e.batch() >= 1);
    CHECK(std::string(e.what()).find("epoch") != std::string::npos);
  }
}

TEST_CASE("arm sets") {
  const auto t3 = resolve_arms("components");
  REQUIRE(t3.size() == 4);
  std::vector<std::pair<double, double>> ab;
  for (const auto& arm : t3) {
    RunConfig c;
    arm.apply(c);
    ab.emplace_back(c.loss.alpha, c.loss.beta);
  }
  CHECK(ab == std::vector<std::pair<double, double>>{{0, 0}, {1, 0}, {0, 1}, {1, 1}});

  RunConfig c;
  resolve_arms("head_nobj")[0].apply(c);
  CHECK(c.model.head_input == HeadInput::kNonObject);
  c.resolve();
  CHECK(c.model.head_in_channels(Level::kP3) == c.model.nonobject_channels());

  CHECK(resolve_arms("levels").size() == 7);
  CHECK(resolve_arms("alpha_beta").size() == 9);
  CHECK(resolve_arms("ratio").size() == 3);
  CHECK(resolve_arms("components,full,baseline").size() == 4);
  try {
    resolve_arms("components,bogus");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("bogus") != std::string::npos);
    CHECK(msg.find("sfa_only") != std::string::npos);
  }
}

TEST_CASE("one-seed one-epoch ablation emits four rows") {
  TempDir dir("ablate");
  const RunConfig cfg = tiny();
  const auto r = ablate(cfg, resolve_arms("components"), 2, nullptr, dir.path());
  REQUIRE(r.arms.size() == 4);
  CHECK(r.arms[0].name == "baseline");
  CHECK(r.arms[3].name == "full");
  for (const auto& a : r.arms) CHECK(a.runs.size() == 1);
  const std::string table = r.to_table();
  for (const char* n : {"baseline", "sfa_only", "ofd_only", "full"}) CHECK(table.find(n) != std::string::npos);
  CHECK(std::filesystem::exists(dir / "ablation.json"));
  CHECK(std::filesystem::exists(dir / "ablation.txt"));
  CHECK(std::filesystem::exists(dir.path() / "full" / "seed_42" / "metrics.jsonl"));

  // jobs does not change results
  const auto serial = ablate(cfg, resolve_arms("components"), 1);
  CHECK(serial.to_json() == r.to_json());
}

TEST_CASE("grad_check passes and the alignment loss never reaches the head") {
  const GradCheckReport r = grad_check(tiny(), 20);
  REQUIRE(r.components.size() == 4);
  CHECK(r.passed);
  for (const auto& c : r.components) {
    INFO(c.name);
    CHECK(c.samples >= 20);
    CHECK(c.max_rel_error <= kGradCheckTolerance);
  }
  CHECK(r.components[1].name == "l_al");
  CHECK(r.components[1].max_abs_head_grad == 0.0);
  CHECK(r.components[2].max_abs_head_grad == 0.0);
  CHECK(r.components[0].max_abs_head_grad > 0.0);
}

}  // TEST_SUITE
