// SPDX-License-Identifier: Apache-2.0
// lgfd: data generation, captioning, training, evaluation, ablations,
// gradient checks and heatmap export.
//
// Exit codes: 0 success, 1 invalid input (flags, config, files), 2 runtime
// abort (non-finite loss, failed gradient check).

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "lgfd/caption.hpp"
#include "lgfd/data.hpp"
#include "lgfd/error.hpp"
#include "lgfd/eval.hpp"
#include "lgfd/run_config.hpp"
#include "lgfd/trainer.hpp"

namespace fs = std::filesystem;
using namespace lgfd;

namespace {

constexpr int kExitInvalid = 1;
constexpr int kExitAbort = 2;

RunConfig config_or_default(const std::string& path) {
  if (path.empty()) {
    RunConfig c;
    c.resolve();
    return c;
  }
  return load_run_config(path);
}

// A data directory holds annotations.json and images/.
Dataset load_data_dir(const fs::path& dir) {
  const fs::path ann = dir / "annotations.json";
  if (!fs::exists(ann)) throw DataError("no annotations.json in data directory " + dir.string());
  auto res = load_coco(ann, dir / "images");
  if (res.dropped_boxes > 0)
    std::cerr << "warning: dropped " << res.dropped_boxes << " zero-area boxes from " << ann.string() << '\n';
  return std::move(res.dataset);
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Language-guided feature disentanglement for infrared object detection"};
  app.require_subcommand(1);

  // gen-data
  std::string gd_config, gd_out, gd_split = "train";
  int gd_count = -1;
  auto* gen = app.add_subcommand("gen-data", "Write synthetic scenes as PGM images plus COCO-style annotations");
  gen->add_option("--config", gd_config, "Run config file (defaults when omitted)");
  gen->add_option("--out", gd_out, "Output directory")->required();
  gen->add_option("--count", gd_count, "Number of images (default: the split's count in the config)");
  gen->add_option("--split", gd_split, "Which split to generate")->check(CLI::IsMember({"train", "eval"}));

  // caption
  std::string cap_ann, cap_out;
  auto* cap = app.add_subcommand("caption", "Generate one caption per image as TSV (image_id<TAB>caption)");
  cap->add_option("--annotations", cap_ann, "COCO-style annotation file")->required();
  cap->add_option("--out", cap_out, "Output TSV path")->required();

  // train
  std::string tr_config, tr_data, tr_eval_data, tr_run_dir;
  std::optional<int> tr_epochs;
  std::optional<std::uint64_t> tr_seed;
  auto* tr = app.add_subcommand("train", "Train one model");
  tr->add_option("--config", tr_config, "Run config file (defaults when omitted)");
  tr->add_option("--data", tr_data, "Training data directory (synthetic split from the config when omitted)");
  tr->add_option("--eval-data", tr_eval_data, "Evaluation data directory (default: synthetic eval split, or --data)");
  tr->add_option("--run-dir", tr_run_dir, "Output directory for metrics, report and checkpoints")->required();
  tr->add_option("--epochs", tr_epochs, "Override train.epochs");
  tr->add_option("--seed", tr_seed, "Override train.seed");

  // eval
  std::string ev_ckpt, ev_data, ev_out;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--data", ev_data, "Data directory (synthetic eval split from the embedded config when omitted)");
  ev->add_option("--out", ev_out, "Also write the report JSON here");

  // ablate
  std::string ab_config, ab_arms = "components", ab_out;
  std::optional<int> ab_seeds, ab_epochs;
  int ab_jobs = 1;
  auto* ab = app.add_subcommand("ablate", "Run ablation arms over several seeds");
  ab->add_option("--config", ab_config, "Base run config file (defaults when omitted)");
  ab->add_option("--arms", ab_arms, "Comma-separated arm sets (components, head_input, levels, alpha_beta, ratio, cbr) or arm names");
  ab->add_option("--seeds", ab_seeds, "Override train.seeds");
  ab->add_option("--epochs", ab_epochs, "Override train.epochs");
  ab->add_option("--jobs", ab_jobs, "Concurrent runs")->check(CLI::PositiveNumber);
  ab->add_option("--out", ab_out, "Directory for ablation.json, ablation.txt and per-run outputs");

  // gradcheck
  std::string gc_config;
  int gc_samples = 24;
  auto* gc = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients on a tiny model");
  gc->add_option("--config", gc_config, "Run config file for loss settings and seed (defaults when omitted)");
  gc->add_option("--samples", gc_samples, "Sampled parameters per loss component")->check(CLI::Range(20, 100000));

  // heatmaps
  std::string hm_ckpt, hm_data, hm_out;
  int hm_count = 8;
  auto* hm = app.add_subcommand("heatmaps", "Export object / non-object activation maps as PGM");
  hm->add_option("--ckpt", hm_ckpt, "Checkpoint file")->required();
  hm->add_option("--data", hm_data, "Data directory (synthetic eval split when omitted)");
  hm->add_option("--out", hm_out, "Output directory")->required();
  hm->add_option("--count", hm_count, "Number of images")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitInvalid;
  }

  try {
    if (*gen) {
      const RunConfig c = config_or_default(gd_config);
      const bool train_split = gd_split == "train";
      const int count = gd_count >= 0 ? gd_count : (train_split ? c.train_count : c.eval_count);
      const Dataset ds = generate_dataset(c.data, train_split ? 0 : RunConfig::kEvalIndexOffset, count);
      export_coco(ds, gd_out);
      std::cout << "wrote " << count << " images to " << gd_out << '\n';
    } else if (*cap) {
      const auto loaded = load_coco(cap_ann, {}, false);
      std::string tsv;
      for (const auto& im : loaded.dataset.images)
        tsv += std::to_string(im.image_id) + "\t" +
               generate_caption(im.boxes, im.width, im.height, loaded.dataset.categories) + "\n";
      write_file(cap_out, tsv);
    } else if (*tr) {
      RunConfig c = config_or_default(tr_config);
      if (tr_epochs) c.train.epochs = *tr_epochs;
      if (tr_seed) c.train.seed = *tr_seed;
      c.resolve();
      const Dataset train_set = tr_data.empty() ? make_train_set(c) : load_data_dir(tr_data);
      const Dataset eval_set = !tr_eval_data.empty() ? load_data_dir(tr_eval_data)
                               : tr_data.empty()     ? make_eval_set(c)
                                                     : train_set;
      const TrainResult r = train(c, train_set, eval_set, fs::path(tr_run_dir), &std::cerr);
      std::cout << report_to_json(r.record.final_report) << '\n';
      std::cerr << "done in " << r.record.wall_time_s << " s\n";
    } else if (*ev) {
      RunConfig c;
      auto model = load_model(ev_ckpt, &c);
      const Dataset data = ev_data.empty() ? make_eval_set(c) : load_data_dir(ev_data);
      const std::string json = report_to_json(evaluate(*model, data, c.eval));
      if (!ev_out.empty()) write_file(ev_out, json + "\n");
      std::cout << json << '\n';
    } else if (*ab) {
      RunConfig c = config_or_default(ab_config);
      if (ab_seeds) c.train.seeds = *ab_seeds;
      if (ab_epochs) c.train.epochs = *ab_epochs;
      c.resolve();
      const auto arms = resolve_arms(ab_arms);
      std::optional<fs::path> out;
      if (!ab_out.empty()) out = ab_out;
      const AblationResult r = ablate(c, arms, ab_jobs, &std::cerr, out);
      std::cout << r.to_table();
    } else if (*gc) {
      const GradCheckReport r = grad_check(config_or_default(gc_config), gc_samples);
      std::cout << r.to_json();
      if (!r.passed) return kExitAbort;
    } else if (*hm) {
      RunConfig c;
      auto model = load_model(hm_ckpt, &c);
      Dataset data = hm_data.empty() ? make_eval_set(c) : load_data_dir(hm_data);
      if (static_cast<int>(data.images.size()) > hm_count) data.images.resize(static_cast<std::size_t>(hm_count));
      const auto files = export_activation_maps(*model, data, hm_out);
      std::cout << "wrote " << files.size() << " heatmaps to " << hm_out << '\n';
    }
  } catch (const TrainingAborted& e) {
    std::cerr << "error: training aborted at epoch " << e.epoch() << ", batch " << e.batch() << ": " << e.what() << '\n';
    return kExitAbort;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitAbort;
  }
  return 0;
}
