// SPDX-License-Identifier: Apache-2.0
#include "lgfd/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "lgfd/checkpoint.hpp"
#include "lgfd/error.hpp"

namespace lgfd {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

ojson report_json(const EvalReport& r) { return ojson::parse(report_to_json(r)); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

}  // namespace

std::string epoch_row_json(const EpochRow& row) {
  ojson j;
  j["epoch"] = row.epoch;
  j["l_det"] = row.l_det;
  j["l_al"] = row.l_al;
  j["l_ds"] = row.l_ds;
  j["total"] = row.total;
  if (row.eval) j["eval"] = report_json(*row.eval);
  return j.dump();
}

std::string run_report_json(const RunRecord& record) {
  ojson j;
  j["config"] = record.config_text;
  j["epochs"] = record.rows.size();
  j["best_epoch"] = record.best_epoch;
  j["best_ap50"] = record.best_ap50;
  j["initial"] = report_json(record.initial);
  j["final"] = report_json(record.final_report);
  return j.dump(2) + "\n";
}

Dataset make_train_set(const RunConfig& config) { return generate_dataset(config.data, 0, config.train_count); }

Dataset make_eval_set(const RunConfig& config) {
  return generate_dataset(config.data, RunConfig::kEvalIndexOffset, config.eval_count);
}

TrainResult train(const RunConfig& config, const Dataset& train_set, const Dataset& eval_set,
                  const std::optional<fs::path>& run_dir, std::ostream* log) {
  const auto start = std::chrono::steady_clock::now();
  RunConfig cfg = config;
  cfg.resolve();
  if (train_set.images.empty()) throw DataError("training set is empty");
  if (train_set.image_size() != cfg.model.image_size)
    throw ConfigError("data.image_size is " + std::to_string(cfg.model.image_size) + " but the training images are " +
                      std::to_string(train_set.image_size()) + " px");
  if (static_cast<int>(train_set.categories.size()) != cfg.model.num_classes)
    throw ConfigError("config declares " + std::to_string(cfg.model.num_classes) + " categories but the data has " +
                      std::to_string(train_set.categories.size()));
  if (static_cast<int>(train_set.images.size()) < cfg.train.batch_size)
    throw ConfigError("train.batch_size " + std::to_string(cfg.train.batch_size) + " exceeds the " +
                      std::to_string(train_set.images.size()) + " training images");

  TrainResult result;
  RunRecord& rec = result.record;
  rec.config_text = serialize_run_config(cfg);
  result.model = std::make_unique<Detector>(cfg.model, cfg.train.seed);
  Detector& model = *result.model;
  Sgd opt(model.parameters().params(), cfg.train.lr, cfg.train.momentum);

  std::ofstream metrics;
  if (run_dir) {
    fs::create_directories(*run_dir);
    metrics.open(*run_dir / "metrics.jsonl", std::ios::binary);
    if (!metrics) throw DataError("cannot write " + (*run_dir / "metrics.jsonl").string());
  }

  rec.initial = evaluate(model, eval_set, cfg.eval);
  model.set_training(true);
  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    EpochRow row;
    row.epoch = epoch + 1;
    int batches = 0;
    for (const auto& idx : batch_indices(train_set.images.size(), cfg.train.batch_size, cfg.train.seed, epoch, true)) {
      const Batch batch = make_batch(train_set, idx);
      const GridTargets targets = assign_targets(batch.boxes, cfg.model.image_size, cfg.model.priors);
      const TrainOutputs out = model.forward_train(batch.images, batch.captions);
      const LossBundle loss = compute_losses(out, targets, cfg.loss);
      const double total = loss.total.item();
      if (!std::isfinite(total))
        throw TrainingAborted(epoch + 1, batches + 1,
                              "non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                                  std::to_string(batches + 1));
      backward(loss.total);
      opt.step();
      opt.zero_grad();
      row.l_det += loss.l_det.item();
      row.l_al += loss.l_al.item();
      row.l_ds += loss.l_ds.item();
      row.total += total;
      ++batches;
    }
    row.l_det /= batches;
    row.l_al /= batches;
    row.l_ds /= batches;
    row.total /= batches;

    const bool last = epoch + 1 == cfg.train.epochs;
    if (last || (cfg.train.eval_every > 0 && (epoch + 1) % cfg.train.eval_every == 0)) {
      row.eval = evaluate(model, eval_set, cfg.eval);
      if (row.eval->ap50 > rec.best_ap50) {
        rec.best_ap50 = row.eval->ap50;
        rec.best_epoch = row.epoch;
        if (run_dir) save_checkpoint(*run_dir / "ckpt_best.bin", model.parameters(), rec.config_text);
      }
    }
    if (log) {
      *log << "epoch " << row.epoch << "/" << cfg.train.epochs << std::fixed << std::setprecision(4) << "  l_det "
           << row.l_det << "  l_al " << row.l_al << "  l_ds " << row.l_ds << "  total " << row.total;
      if (row.eval) *log << "  ap50 " << row.eval->ap50 << "  map " << row.eval->map;
      *log << std::defaultfloat << '\n';
    }
    if (run_dir) metrics << epoch_row_json(row) << '\n' << std::flush;
    rec.rows.push_back(std::move(row));
  }
  rec.final_report = *rec.rows.back().eval;
  if (run_dir) {
    save_checkpoint(*run_dir / "ckpt_last.bin", model.parameters(), rec.config_text);
    write_text(*run_dir / "report.json", run_report_json(rec));
  }
  rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

std::unique_ptr<Detector> load_model(const fs::path& ckpt, RunConfig* config_out) {
  const Checkpoint c = read_checkpoint(ckpt);
  RunConfig cfg;
  try {
    cfg = parse_run_config(c.config_text);
  } catch (const ConfigError& e) {
    throw DataError(ckpt.string() + ": embedded config is invalid: " + e.what());
  }
  auto model = std::make_unique<Detector>(cfg.model, cfg.train.seed);
  load_into(c, model->parameters());
  if (config_out) *config_out = cfg;
  return model;
}

// ---------------------------------------------------------------- ablation

namespace {

std::string fmt_num(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

std::vector<std::pair<std::string, std::vector<Arm>>> arm_sets() {
  std::vector<std::pair<std::string, std::vector<Arm>>> sets;
  sets.push_back({"components",
                  {{"baseline", "SFA - / OFD - (alpha=0, beta=0)", [](RunConfig& c) { c.loss.alpha = c.loss.beta = 0.0; }},
                   {"sfa_only", "SFA + / OFD - (beta=0)", [](RunConfig& c) { c.loss.beta = 0.0; }},
                   {"ofd_only", "SFA - / OFD + (alpha=0)", [](RunConfig& c) { c.loss.alpha = 0.0; }},
                   {"full", "SFA + / OFD +", [](RunConfig&) {}}}});
  sets.push_back({"head_input",
                  {{"head_obj", "head consumes f_obj", [](RunConfig& c) { c.model.head_input = HeadInput::kObject; }},
                   {"head_nobj", "head consumes f_nobj", [](RunConfig& c) { c.model.head_input = HeadInput::kNonObject; }},
                   {"head_concat", "head consumes concat(f_obj, f_nobj)",
                    [](RunConfig& c) { c.model.head_input = HeadInput::kConcat; }}}});
  std::vector<Arm> lv;
  for (int mask = 1; mask < 8; ++mask) {
    std::string name = "dec", desc = "decompose";
    std::array<bool, kNumLevels> d{};
    for (int l = 0; l < kNumLevels; ++l)
      if (mask & (1 << l)) {
        d[static_cast<std::size_t>(l)] = true;
        name += "_" + level_name(static_cast<Level>(l));
        desc += " " + level_name(static_cast<Level>(l));
      }
    lv.push_back({name, desc, [d](RunConfig& c) { c.model.decompose = d; }});
  }
  sets.push_back({"levels", lv});
  std::vector<Arm> ab;
  for (double a : {0.5, 1.0, 1.5})
    for (double b : {0.5, 1.0, 1.5})
      ab.push_back({"ab_" + fmt_num(a) + "_" + fmt_num(b), "alpha=" + fmt_num(a) + ", beta=" + fmt_num(b),
                    [a, b](RunConfig& c) {
                      c.loss.alpha = a;
                      c.loss.beta = b;
                    }});
  sets.push_back({"alpha_beta", ab});
  std::vector<Arm> ratio;
  for (double r : {0.25, 0.5, 0.75})
    ratio.push_back({"ratio_" + fmt_num(r), "object channel ratio " + fmt_num(r), [r](RunConfig& c) { c.model.ratio = r; }});
  sets.push_back({"ratio", ratio});
  std::vector<Arm> cbr;
  for (CbrKind k : {CbrKind::kNone, CbrKind::k1x1, CbrKind::k3x3, CbrKind::k3x3x2})
    cbr.push_back({"cbr_" + cbr_name(k), "projector front end " + cbr_name(k), [k](RunConfig& c) { c.model.cbr = k; }});
  sets.push_back({"cbr", cbr});
  return sets;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Sample standard deviation; 0 for fewer than two values.
double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

std::vector<std::string> arm_set_names() {
  std::vector<std::string> names;
  for (const auto& [name, arms] : arm_sets()) names.push_back(name);
  return names;
}

std::vector<Arm> all_arms() {
  std::vector<Arm> out;
  std::set<std::string> seen;
  for (auto& [set, arms] : arm_sets())
    for (auto& a : arms)
      if (seen.insert(a.name).second) out.push_back(a);
  return out;
}

std::vector<Arm> resolve_arms(const std::string& spec) {
  const auto sets = arm_sets();
  const auto arms = all_arms();
  std::vector<Arm> out;
  std::set<std::string> seen;
  auto add = [&](const Arm& a) {
    if (seen.insert(a.name).second) out.push_back(a);
  };
  std::string s = spec;
  std::replace(s.begin(), s.end(), ',', ' ');
  std::istringstream is(s);
  for (std::string w; is >> w;) {
    bool found = false;
    for (const auto& [name, members] : sets)
      if (name == w) {
        for (const auto& a : members) add(a);
        found = true;
      }
    for (const auto& a : arms)
      if (!found && a.name == w) {
        add(a);
        found = true;
      }
    if (!found) {
      std::string valid;
      for (const auto& [name, members] : sets) valid += (valid.empty() ? "" : ", ") + name;
      for (const auto& a : arms) valid += ", " + a.name;
      throw ConfigError("unknown ablation arm '" + w + "'; valid: " + valid);
    }
  }
  if (out.empty()) throw ConfigError("no ablation arms given");
  return out;
}

AblationResult ablate(const RunConfig& base, const std::vector<Arm>& arms, int jobs, std::ostream* log,
                      const std::optional<fs::path>& out_dir) {
  RunConfig resolved = base;
  resolved.resolve();
  const Dataset train_set = make_train_set(resolved);
  const Dataset eval_set = make_eval_set(resolved);
  const int seeds = resolved.train.seeds;

  struct Job {
    std::size_t arm;
    int k;
  };
  std::vector<Job> work;
  for (std::size_t a = 0; a < arms.size(); ++a)
    for (int k = 0; k < seeds; ++k) work.push_back({a, k});

  // Validate every arm before spending time on any run.
  for (const auto& arm : arms) {
    RunConfig c = resolved;
    arm.apply(c);
    c.resolve();
  }

  AblationResult result;
  for (const auto& a : arms) {
    ArmSummary s;
    s.name = a.name;
    s.description = a.description;
    s.runs.resize(static_cast<std::size_t>(seeds));
    s.seeds.resize(static_cast<std::size_t>(seeds));
    result.arms.push_back(std::move(s));
  }

  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  auto worker = [&]() {
    for (std::size_t i = next++; i < work.size(); i = next++) {
      const Job job = work[i];
      try {
        RunConfig c = resolved;
        arms[job.arm].apply(c);
        c.train.seed = resolved.train.seed + static_cast<std::uint64_t>(job.k);
        std::optional<fs::path> dir;
        if (out_dir) dir = *out_dir / arms[job.arm].name / ("seed_" + std::to_string(c.train.seed));
        TrainResult r = train(c, train_set, eval_set, dir);
        std::lock_guard lock(mu);
        auto& s = result.arms[job.arm];
        s.seeds[static_cast<std::size_t>(job.k)] = c.train.seed;
        s.runs[static_cast<std::size_t>(job.k)] = std::move(r.record);
        if (log)
          *log << arms[job.arm].name << " seed " << c.train.seed << std::fixed << std::setprecision(4) << "  ap50 "
               << s.runs[static_cast<std::size_t>(job.k)].final_report.ap50 << "  map "
               << s.runs[static_cast<std::size_t>(job.k)].final_report.map << "  ("
               << std::setprecision(1) << s.runs[static_cast<std::size_t>(job.k)].wall_time_s << " s)"
               << std::defaultfloat << std::endl;
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        next = work.size();
      }
    }
  };
  const int n_threads = std::max(1, std::min<int>(jobs, static_cast<int>(work.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  for (auto& s : result.arms) {
    std::vector<double> ap50, map, cos, top1;
    for (const auto& r : s.runs) {
      ap50.push_back(r.final_report.ap50);
      map.push_back(r.final_report.map);
      cos.push_back(r.final_report.mean_obj_nobj_cosine);
      top1.push_back(r.final_report.text_retrieval_top1);
    }
    s.ap50_mean = mean_of(ap50);
    s.ap50_std = std_of(ap50);
    s.map_mean = mean_of(map);
    s.map_std = std_of(map);
    s.cosine_mean = mean_of(cos);
    s.retrieval_mean = mean_of(top1);
  }
  if (out_dir) {
    fs::create_directories(*out_dir);
    write_text(*out_dir / "ablation.json", result.to_json());
    write_text(*out_dir / "ablation.txt", result.to_table());
  }
  return result;
}

std::string AblationResult::to_json() const {
  ojson j = ojson::array();
  for (const auto& s : arms) {
    ojson a;
    a["arm"] = s.name;
    a["description"] = s.description;
    a["ap50_mean"] = s.ap50_mean;
    a["ap50_std"] = s.ap50_std;
    a["map_mean"] = s.map_mean;
    a["map_std"] = s.map_std;
    a["mean_obj_nobj_cosine"] = s.cosine_mean;
    a["text_retrieval_top1"] = s.retrieval_mean;
    a["runs"] = ojson::array();
    for (std::size_t k = 0; k < s.runs.size(); ++k)
      a["runs"].push_back({{"seed", s.seeds[k]},
                           {"initial", report_json(s.runs[k].initial)},
                           {"final", report_json(s.runs[k].final_report)}});
    j.push_back(std::move(a));
  }
  return j.dump(2) + "\n";
}

std::string AblationResult::to_table() const {
  const std::vector<std::string> head = {"arm", "setting", "seeds", "AP50", "mAP", "cos(obj,nobj)", "top1"};
  std::vector<std::vector<std::string>> rows;
  auto pm = [](double m, double s) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << 100.0 * m << " +- " << 100.0 * s;
    return os.str();
  };
  auto f3 = [](double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3) << v;
    return os.str();
  };
  for (const auto& s : arms)
    rows.push_back({s.name, s.description, std::to_string(s.runs.size()), pm(s.ap50_mean, s.ap50_std),
                    pm(s.map_mean, s.map_std), f3(s.cosine_mean), f3(s.retrieval_mean)});
  std::vector<std::size_t> width(head.size());
  for (std::size_t c = 0; c < head.size(); ++c) {
    width[c] = head[c].size();
    for (const auto& r : rows) width[c] = std::max(width[c], r[c].size());
  }
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c)
      os << (c ? "  " : "") << std::left << std::setw(static_cast<int>(width[c])) << cells[c];
    os << '\n';
  };
  line(head);
  std::size_t total = 0;
  for (auto w : width) total += w + 2;
  os << std::string(total - 2, '-') << '\n';
  for (const auto& r : rows) line(r);
  return os.str();
}

// ---------------------------------------------------------------- grad check

GradCheckReport grad_check(const RunConfig& config, int samples_per_component) {
  RunConfig cfg = config;
  cfg.data.image_size = 32;
  cfg.data.categories = SceneSpec::default_categories(32);
  cfg.data.min_objects = 2;
  cfg.data.max_objects = 4;
  cfg.model.L = 8;
  cfg.model.heads = 2;
  cfg.model.priors = {4.0, 12.0, 28.0};
  cfg.resolve();
  constexpr int kBatch = 4;

  const Dataset data = generate_dataset(cfg.data, 0, kBatch);
  std::vector<std::size_t> idx(kBatch);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const Batch batch = make_batch(data, idx);
  const GridTargets targets = assign_targets(batch.boxes, cfg.model.image_size, cfg.model.priors);

  Detector model(cfg.model, cfg.train.seed);
  model.set_training(true);
  auto& params = model.parameters().params();

  const std::vector<std::string> names = {"l_det", "l_al", "l_ds", "total"};
  auto evaluate_component = [&](std::size_t comp) {
    const TrainOutputs out = model.forward_train(batch.images, batch.captions);
    const LossBundle b = compute_losses(out, targets, cfg.loss);
    switch (comp) {
      case 0: return b.l_det;
      case 1: return b.l_al;
      case 2: return b.l_ds;
      default: return b.total;
    }
  };

  GradCheckReport report;
  report.passed = true;
  for (std::size_t comp = 0; comp < names.size(); ++comp) {
    zero_grad(params);
    backward(evaluate_component(comp));
    std::vector<std::vector<double>> analytic;
    GradCheckComponent res;
    res.name = names[comp];
    for (auto& p : params) {
      std::vector<double> g(p.tensor.grad().begin(), p.tensor.grad().end());
      if (g.empty()) g.assign(static_cast<std::size_t>(p.tensor.numel()), 0.0);
      if (p.name.rfind("head.", 0) == 0)
        for (double v : g) res.max_abs_head_grad = std::max(res.max_abs_head_grad, std::abs(v));
      analytic.push_back(std::move(g));
    }
    zero_grad(params);

    Rng rng(mix_seed(cfg.train.seed, 0x6772616400000000ULL + comp));
    NoGradGuard no_grad;
    auto probe = [&](double& slot, double value, std::uint64_t& signs) {
      slot = value;
      ReluSignRecorder rec;
      const double f = evaluate_component(comp).item();
      signs = rec.fingerprint();
      return f;
    };
    const int max_draws = 50 * samples_per_component;
    for (int draw = 0; draw < max_draws && res.samples < samples_per_component; ++draw) {
      const std::size_t pi = rng.below(params.size());
      auto data_span = params[pi].tensor.data();
      const std::size_t k = rng.below(data_span.size());
      double& slot = data_span[k];
      const double orig = slot;
      std::uint64_t s0 = 0, sp = 0, sm = 0;
      probe(slot, orig, s0);
      const double fp = probe(slot, orig + kGradCheckStep, sp);
      const double fm = probe(slot, orig - kGradCheckStep, sm);
      slot = orig;
      // A relu input changing sign inside [-h, h] puts a kink in the
      // difference quotient; such a draw says nothing about the gradient.
      if (sp != s0 || sm != s0) {
        ++res.kink_skips;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * kGradCheckStep);
      const double a = analytic[pi][k];
      const double denom = std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
      res.max_rel_error = std::max(res.max_rel_error, std::abs(a - numeric) / denom);
      ++res.samples;
    }
    res.passed = res.samples >= samples_per_component && res.max_rel_error <= kGradCheckTolerance;
    report.passed = report.passed && res.passed;
    report.components.push_back(res);
  }
  return report;
}

std::string GradCheckReport::to_json() const {
  ojson j;
  j["passed"] = passed;
  j["components"] = ojson::array();
  for (const auto& c : components)
    j["components"].push_back({{"name", c.name},
                               {"samples", c.samples},
                               {"max_rel_error", c.max_rel_error},
                               {"kink_skips", c.kink_skips},
                               {"max_abs_head_grad", c.max_abs_head_grad},
                               {"passed", c.passed}});
  return j.dump(2) + "\n";
}

}  // namespace lgfd
