// SPDX-License-Identifier: Apache-2.0
#include "lgfd/run_config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <algorithm>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "lgfd/error.hpp"

namespace lgfd {

namespace pt = boost::property_tree;

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 2) throw ConfigError("train.batch_size must be >= 2");
  if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must lie in [0, 1)");
  if (eval_every < 0) throw ConfigError("train.eval_every must be >= 0");
  if (seeds < 1) throw ConfigError("train.seeds must be >= 1");
}

void RunConfig::resolve() {
  data.validate();
  model.image_size = data.image_size;
  model.num_classes = static_cast<int>(data.categories.size());
  model.validate();
  loss.validate();
  train.validate();
  if (train_count < 1) throw ConfigError("data.train_count must be >= 1");
  if (eval_count < 1) throw ConfigError("data.eval_count must be >= 1");
  if (eval.batch_size < 1) throw ConfigError("eval.batch_size must be >= 1");
  if (!(eval.decode.score_thresh >= 0.0 && eval.decode.score_thresh < 1.0))
    throw ConfigError("eval.score_thresh must lie in [0, 1)");
  if (!(eval.decode.nms_iou > 0.0 && eval.decode.nms_iou <= 1.0)) throw ConfigError("eval.nms_iou must lie in (0, 1]");
  if (eval.decode.max_detections < 1) throw ConfigError("eval.max_detections must be >= 1");
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  T v{};
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ConfigError(key + ": cannot parse '" + s + "' as a number");
  return v;
}

bool parse_bool(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  if (s == "true") return true;
  if (s == "false") return false;
  throw ConfigError(key + ": expected true or false, got '" + s + "'");
}

std::vector<std::string> words(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

SceneCategory parse_category(const std::string& key, const std::string& name, const std::string& raw) {
  const auto w = words(raw);
  if (w.size() != 6)
    throw ConfigError(key + ": expected '<ellipse|rectangle> min_height max_height aspect min_delta max_delta'");
  SceneCategory c;
  c.name = name;
  if (w[0] == "ellipse")
    c.shape = ShapeFamily::kEllipse;
  else if (w[0] == "rectangle")
    c.shape = ShapeFamily::kRectangle;
  else
    throw ConfigError(key + ": unknown shape '" + w[0] + "'");
  c.min_height = parse_number<double>(key, w[1]);
  c.max_height = parse_number<double>(key, w[2]);
  c.aspect = parse_number<double>(key, w[3]);
  c.min_delta = parse_number<double>(key, w[4]);
  c.max_delta = parse_number<double>(key, w[5]);
  return c;
}

std::array<bool, kNumLevels> parse_levels(const std::string& key, const std::string& raw) {
  std::array<bool, kNumLevels> out{false, false, false};
  std::string s = trim(raw);
  if (s == "none") return out;
  std::replace(s.begin(), s.end(), ',', ' ');
  for (const auto& w : words(s)) {
    bool found = false;
    for (int l = 0; l < kNumLevels; ++l)
      if (w == level_name(static_cast<Level>(l))) {
        out[static_cast<std::size_t>(l)] = true;
        found = true;
      }
    if (!found) throw ConfigError(key + ": unknown level '" + w + "' (expected p3, p4, p5 or none)");
  }
  return out;
}

std::string levels_str(const std::array<bool, kNumLevels>& d) {
  std::string s;
  for (int l = 0; l < kNumLevels; ++l)
    if (d[static_cast<std::size_t>(l)]) s += (s.empty() ? "" : ",") + level_name(static_cast<Level>(l));
  return s.empty() ? "none" : s;
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  RunConfig c;
  bool categories_given = false;
  for (const auto& [section, body] : tree) {
    if (!body.data().empty()) throw ConfigError("config key '" + section + "' appears outside a section");
    for (const auto& [name, node] : body) {
      const std::string key = section + "." + name;
      const std::string v = node.data();
      if (section == "data") {
        if (name == "image_size") c.data.image_size = parse_number<int>(key, v);
        else if (name == "train_count") c.train_count = parse_number<int>(key, v);
        else if (name == "eval_count") c.eval_count = parse_number<int>(key, v);
        else if (name == "min_objects") c.data.min_objects = parse_number<int>(key, v);
        else if (name == "max_objects") c.data.max_objects = parse_number<int>(key, v);
        else if (name == "background") c.data.background = parse_number<double>(key, v);
        else if (name == "noise_amplitude") c.data.noise_amplitude = parse_number<double>(key, v);
        else if (name == "seed") c.data.seed = parse_number<std::uint64_t>(key, v);
        else if (name.rfind("category.", 0) == 0 && name.size() > 9) {
          if (!categories_given) c.data.categories.clear();
          categories_given = true;
          c.data.categories.push_back(parse_category(key, name.substr(9), v));
        } else throw ConfigError("unknown config key '" + key + "'");
      } else if (section == "model") {
        if (name == "L") c.model.L = parse_number<int>(key, v);
        else if (name == "decompose") c.model.decompose = parse_levels(key, v);
        else if (name == "ratio") c.model.ratio = parse_number<double>(key, v);
        else if (name == "pool_size") c.model.pool_size = parse_number<int>(key, v);
        else if (name == "heads") c.model.heads = parse_number<int>(key, v);
        else if (name == "cbr") c.model.cbr = parse_cbr(trim(v));
        else if (name == "head_input") c.model.head_input = parse_head_input(trim(v));
        else if (name == "priors") {
          const auto w = words(v);
          if (w.size() != kNumLevels) throw ConfigError(key + ": expected three values (p3 p4 p5)");
          for (int l = 0; l < kNumLevels; ++l) c.model.priors[static_cast<std::size_t>(l)] = parse_number<double>(key, w[static_cast<std::size_t>(l)]);
        } else throw ConfigError("unknown config key '" + key + "'");
      } else if (section == "loss") {
        if (name == "tau") c.loss.tau = parse_number<double>(key, v);
        else if (name == "alpha") c.loss.alpha = parse_number<double>(key, v);
        else if (name == "beta") c.loss.beta = parse_number<double>(key, v);
        else if (name == "symmetric_al") c.loss.symmetric_al = parse_bool(key, v);
        else if (name == "abs_ds") c.loss.abs_ds = parse_bool(key, v);
        else throw ConfigError("unknown config key '" + key + "'");
      } else if (section == "train") {
        if (name == "epochs") c.train.epochs = parse_number<int>(key, v);
        else if (name == "batch_size") c.train.batch_size = parse_number<int>(key, v);
        else if (name == "lr") c.train.lr = parse_number<double>(key, v);
        else if (name == "momentum") c.train.momentum = parse_number<double>(key, v);
        else if (name == "seed") c.train.seed = parse_number<std::uint64_t>(key, v);
        else if (name == "eval_every") c.train.eval_every = parse_number<int>(key, v);
        else if (name == "seeds") c.train.seeds = parse_number<int>(key, v);
        else throw ConfigError("unknown config key '" + key + "'");
      } else if (section == "eval") {
        if (name == "score_thresh") c.eval.decode.score_thresh = parse_number<double>(key, v);
        else if (name == "nms_iou") c.eval.decode.nms_iou = parse_number<double>(key, v);
        else if (name == "max_detections") c.eval.decode.max_detections = parse_number<int>(key, v);
        else if (name == "batch_size") c.eval.batch_size = parse_number<int>(key, v);
        else throw ConfigError("unknown config key '" + key + "'");
      } else {
        throw ConfigError("unknown config section [" + section + "]");
      }
    }
  }
  c.resolve();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_run_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string serialize_run_config(const RunConfig& c) {
  std::ostringstream os;
  const auto d = format_double;
  os << "[data]\n"
     << "image_size = " << c.data.image_size << '\n'
     << "train_count = " << c.train_count << '\n'
     << "eval_count = " << c.eval_count << '\n'
     << "min_objects = " << c.data.min_objects << '\n'
     << "max_objects = " << c.data.max_objects << '\n'
     << "background = " << d(c.data.background) << '\n'
     << "noise_amplitude = " << d(c.data.noise_amplitude) << '\n'
     << "seed = " << c.data.seed << '\n';
  for (const auto& cat : c.data.categories)
    os << "category." << cat.name << " = " << (cat.shape == ShapeFamily::kEllipse ? "ellipse" : "rectangle") << ' '
       << d(cat.min_height) << ' ' << d(cat.max_height) << ' ' << d(cat.aspect) << ' ' << d(cat.min_delta) << ' '
       << d(cat.max_delta) << '\n';
  os << "\n[model]\n"
     << "L = " << c.model.L << '\n'
     << "decompose = " << levels_str(c.model.decompose) << '\n'
     << "ratio = " << d(c.model.ratio) << '\n'
     << "pool_size = " << c.model.pool_size << '\n'
     << "heads = " << c.model.heads << '\n'
     << "cbr = " << cbr_name(c.model.cbr) << '\n'
     << "head_input = " << head_input_name(c.model.head_input) << '\n'
     << "priors = " << d(c.model.priors[0]) << ' ' << d(c.model.priors[1]) << ' ' << d(c.model.priors[2]) << '\n';
  os << "\n[loss]\n"
     << "tau = " << d(c.loss.tau) << '\n'
     << "alpha = " << d(c.loss.alpha) << '\n'
     << "beta = " << d(c.loss.beta) << '\n'
     << "symmetric_al = " << (c.loss.symmetric_al ? "true" : "false") << '\n'
     << "abs_ds = " << (c.loss.abs_ds ? "true" : "false") << '\n';
  os << "\n[train]\n"
     << "epochs = " << c.train.epochs << '\n'
     << "batch_size = " << c.train.batch_size << '\n'
     << "lr = " << d(c.train.lr) << '\n'
     << "momentum = " << d(c.train.momentum) << '\n'
     << "seed = " << c.train.seed << '\n'
     << "eval_every = " << c.train.eval_every << '\n'
     << "seeds = " << c.train.seeds << '\n';
  os << "\n[eval]\n"
     << "score_thresh = " << d(c.eval.decode.score_thresh) << '\n'
     << "nms_iou = " << d(c.eval.decode.nms_iou) << '\n'
     << "max_detections = " << c.eval.decode.max_detections << '\n'
     << "batch_size = " << c.eval.batch_size << '\n';
  return os.str();
}

}  // namespace lgfd
