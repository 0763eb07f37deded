#pragma once

// Experiment configuration files.
//
// Grammar (line oriented):
//
//   file     := { line }
//   line     := blank | comment | header | entry
//   comment  := '#' text
//   header   := '[' section ']'        section: task | model | model:NAME |
//                                       train | sweep | experiment | probe | report
//   entry    := key '=' value { ',' value }
//
// Leading/trailing whitespace is ignored and '#' starts a comment anywhere
// outside a value. Only [sweep] entries and the list keys (experiment.seeds,
// task.families) accept several values. [sweep] keys are qualified as
// task.KEY, model.KEY or train.KEY; a model axis applies to every model.
// `layers = auto` in a model section uses the task's required depth
// (2 for NAR/NARR, floor(n/2) for RingTransfer).

#include <cstdint>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "glstm/model_config.hpp"
#include "glstm/tasks.hpp"
#include "glstm/train.hpp"

namespace glstm {

// ---------------------------------------------------------------------------
// Section key tables

inline void set_task_key(TaskSpec& t, SplitSizes& sizes, std::uint64_t& seed, const std::string& key,
                         const std::vector<std::string>& vals) {
  using namespace detail;
  auto one = [&]() -> const std::string& {
    if (vals.size() != 1) throw ConfigError("task." + key + " takes a single value");
    return vals[0];
  };
  if (key == "families") {
    t.gpp.families.clear();
    for (const auto& v : vals) {
      try {
        t.gpp.families.push_back(parse_family(v));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    }
    return;
  }
  const std::string& v = one();
  if (key == "name") {
    try {
      t.kind = parse_task_kind(v);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  } else if (key == "neighbors") t.neighbors = parse_count(key, v);
  else if (key == "value_dim") t.value_dim = parse_count(key, v);
  else if (key == "ring_size") t.ring_size = parse_count(key, v);
  else if (key == "classes") t.classes = parse_count(key, v);
  else if (key == "train_size") sizes.train = parse_count(key, v);
  else if (key == "validation_size") sizes.validation = parse_count(key, v);
  else if (key == "test_size") sizes.test = parse_count(key, v);
  else if (key == "seed") seed = parse_count(key, v);
  else if (key == "n_min") t.gpp.n_min = parse_count(key, v);
  else if (key == "n_max") t.gpp.n_max = parse_count(key, v);
  else if (key == "er_p_min") t.gpp.er_p_min = parse_real(key, v);
  else if (key == "er_p_max") t.gpp.er_p_max = parse_real(key, v);
  else if (key == "ba_m_min") t.gpp.ba_m_min = parse_count(key, v);
  else if (key == "ba_m_max") t.gpp.ba_m_max = parse_count(key, v);
  else if (key == "max_retries") t.gpp.max_retries = parse_count(key, v);
  else throw ConfigError("unknown task key '" + key + "'");
}

inline std::vector<std::pair<std::string, std::string>> task_items(const TaskSpec& t, const SplitSizes& s,
                                                                   std::uint64_t seed) {
  std::string fams;
  for (auto f : t.gpp.families) fams += (fams.empty() ? "" : ", ") + std::string(family_name(f));
  return {{"name", task_name(t.kind)},
          {"neighbors", std::to_string(t.neighbors)},
          {"value_dim", std::to_string(t.value_dim)},
          {"ring_size", std::to_string(t.ring_size)},
          {"classes", std::to_string(t.classes)},
          {"train_size", std::to_string(s.train)},
          {"validation_size", std::to_string(s.validation)},
          {"test_size", std::to_string(s.test)},
          {"seed", std::to_string(seed)},
          {"families", fams},
          {"n_min", std::to_string(t.gpp.n_min)},
          {"n_max", std::to_string(t.gpp.n_max)},
          {"er_p_min", format_real(t.gpp.er_p_min)},
          {"er_p_max", format_real(t.gpp.er_p_max)},
          {"ba_m_min", std::to_string(t.gpp.ba_m_min)},
          {"ba_m_max", std::to_string(t.gpp.ba_m_max)},
          {"max_retries", std::to_string(t.gpp.max_retries)}};
}

inline void set_train_key(TrainConfig& c, const std::string& key, const std::string& v) {
  using namespace detail;
  if (key == "lr") c.lr = parse_real(key, v);
  else if (key == "beta1") c.beta1 = parse_real(key, v);
  else if (key == "beta2") c.beta2 = parse_real(key, v);
  else if (key == "eps") c.eps = parse_real(key, v);
  else if (key == "weight_decay") c.weight_decay = parse_real(key, v);
  else if (key == "batch_size") c.batch_size = parse_count(key, v);
  else if (key == "epochs") c.epochs = parse_count(key, v);
  else if (key == "patience") c.patience = parse_count(key, v);
  else if (key == "grad_clip") c.grad_clip = parse_real(key, v);
  else if (key == "fresh_sampling") c.fresh_sampling = parse_bool(key, v);
  else if (key == "stop_at") c.stop_at = v == "none" ? std::numeric_limits<double>::quiet_NaN() : parse_real(key, v);
  else throw ConfigError("unknown train key '" + key + "'");
}

inline std::vector<std::pair<std::string, std::string>> train_items(const TrainConfig& c) {
  return {{"lr", format_real(c.lr)},
          {"beta1", format_real(c.beta1)},
          {"beta2", format_real(c.beta2)},
          {"eps", format_real(c.eps)},
          {"weight_decay", format_real(c.weight_decay)},
          {"batch_size", std::to_string(c.batch_size)},
          {"epochs", std::to_string(c.epochs)},
          {"patience", std::to_string(c.patience)},
          {"grad_clip", format_real(c.grad_clip)},
          {"fresh_sampling", c.fresh_sampling ? "true" : "false"},
          {"stop_at", std::isfinite(c.stop_at) ? format_real(c.stop_at) : "none"}};
}

// ---------------------------------------------------------------------------
// Experiment config

enum class ProbeKind { kNone, kJacobian, kMixing, kFlatVsDeep };

inline const char* probe_kind_name(ProbeKind k) {
  switch (k) {
    case ProbeKind::kNone: return "none";
    case ProbeKind::kJacobian: return "jacobian";
    case ProbeKind::kMixing: return "mixing";
    case ProbeKind::kFlatVsDeep: return "flat_vs_deep";
  }
  return "?";
}

struct ProbeSpec {
  ProbeKind kind = ProbeKind::kNone;
  /// Test instances probed per trained run.
  std::size_t instances = 200;
  std::size_t min_depth = 2;
  std::size_t max_depth = 6;
  std::size_t feature_dim = 4;
  std::size_t hidden = 32;
};

struct ReportSpec {
  std::string figure = "fig5a";
  /// Run label used as x axis (a sweep key such as task.neighbors).
  std::string x = "task.neighbors";
  std::string x_label = "neighbors N";
  std::string y_label = "test metric";
  bool log_x = true;
  bool log_y = false;
};

struct ModelSpec {
  std::string name;
  ModelConfig config;
  bool auto_layers = false;
};

struct SweepAxis {
  std::string key;
  std::vector<std::string> values;
};

struct ExperimentConfig {
  TaskSpec task;
  SplitSizes sizes;
  std::uint64_t task_seed = 0;
  std::vector<ModelSpec> models;
  TrainConfig train;
  std::vector<SweepAxis> sweep;
  std::vector<std::uint64_t> seeds = {0};
  std::string out = "runs";
  std::size_t workers = 1;
  ProbeSpec probe;
  ReportSpec report;
};

/// One fully resolved (sweep point, model, seed) run.
struct RunSpec {
  std::string model_name;
  TaskSpec task;
  SplitSizes sizes;
  std::uint64_t task_seed = 0;
  ModelConfig model;
  TrainConfig train;
  std::uint64_t seed = 0;
  /// Sweep key -> value at this point, plus "model".
  std::map<std::string, std::string> point;
};

inline std::size_t task_required_depth(const TaskSpec& t) {
  switch (t.kind) {
    case TaskKind::kNar:
    case TaskKind::kNarr: return 2;
    case TaskKind::kRingTransfer: return t.ring_size / 2;
    default: throw ConfigError("layers = auto is not defined for task '" + std::string(task_name(t.kind)) + "'");
  }
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, ',')) out.push_back(trim(cur));
  if (!s.empty() && s.back() == ',') out.emplace_back();
  return out;
}

inline void set_model_spec_key(ModelSpec& m, const std::string& key, const std::string& v) {
  if (key == "layers" && v == "auto") {
    m.auto_layers = true;
    return;
  }
  if (key == "layers") m.auto_layers = false;
  set_model_key(m.config, key, v);
}

inline void apply_axis(ExperimentConfig& c, const std::string& key, const std::string& value) {
  const auto dot = key.find('.');
  if (dot == std::string::npos) throw ConfigError("sweep key '" + key + "' must be qualified (task., model., train.)");
  const std::string sec = key.substr(0, dot), k = key.substr(dot + 1);
  if (sec == "task") set_task_key(c.task, c.sizes, c.task_seed, k, {value});
  else if (sec == "model")
    for (auto& m : c.models) set_model_spec_key(m, k, value);
  else if (sec == "train") set_train_key(c.train, k, value);
  else throw ConfigError("sweep key '" + key + "' has unknown section '" + sec + "'");
}

}  // namespace detail

/// Parses config text. Defaults fill every key not given; unknown sections
/// and keys are rejected with their line and column.
inline ExperimentConfig parse_config_text(const std::string& text) {
  using namespace detail;
  ExperimentConfig c;
  std::map<std::string, std::size_t> model_index;
  std::string section;
  ModelSpec* model = nullptr;
  std::istringstream is(text);
  std::string raw;
  std::size_t line_no = 0;
  std::map<std::string, std::size_t> seen_keys;
  while (std::getline(is, raw)) {
    ++line_no;
    std::string line = raw;
    if (const auto h = line.find('#'); h != std::string::npos) line = line.substr(0, h);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const std::size_t col = first + 1;
    line = trim(line);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("unterminated section header", line_no, col);
      section = trim(line.substr(1, line.size() - 2));
      model = nullptr;
      if (section == "model" || section.rfind("model:", 0) == 0) {
        const std::string name = section == "model" ? "default" : trim(section.substr(6));
        if (name.empty()) throw ConfigError("empty model name", line_no, col);
        if (model_index.count(name)) throw ConfigError("duplicate model section '" + name + "'", line_no, col);
        model_index[name] = c.models.size();
        c.models.push_back({name, ModelConfig{}, false});
        model = &c.models.back();
        section = "model";
      } else if (section != "task" && section != "train" && section != "sweep" && section != "experiment" &&
                 section != "probe" && section != "report") {
        throw ConfigError("unknown section '" + section + "'", line_no, col + 1);
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("expected 'key = value'", line_no, col);
    if (section.empty()) throw ConfigError("entry outside any section", line_no, col);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const std::size_t eq_raw = raw.find('=');
    const std::size_t vstart = raw.find_first_not_of(" \t", eq_raw + 1);
    const std::size_t vcol = (vstart == std::string::npos ? eq_raw + 1 : vstart) + 1;
    if (key.empty()) throw ConfigError("missing key", line_no, col);
    const std::string dup_key = section + "." + (model ? model->name + "." : "") + key;
    if (seen_keys.count(dup_key)) throw ConfigError("duplicate key '" + key + "'", line_no, col);
    seen_keys[dup_key] = line_no;
    const auto vals = split_list(value);
    for (const auto& v : vals)
      if (v.empty()) throw ConfigError("empty value for '" + key + "'", line_no, vcol);
    auto single = [&]() -> const std::string& {
      if (vals.size() != 1) throw ConfigError(key + " takes a single value", line_no, vcol);
      return vals[0];
    };
    try {
      if (section == "task") {
        set_task_key(c.task, c.sizes, c.task_seed, key, vals);
      } else if (section == "model") {
        set_model_spec_key(*model, key, single());
      } else if (section == "train") {
        set_train_key(c.train, key, single());
        c.train.validate();
      } else if (section == "sweep") {
        c.sweep.push_back({key, vals});
      } else if (section == "experiment") {
        if (key == "seeds") {
          c.seeds.clear();
          for (const auto& v : vals) c.seeds.push_back(parse_count(key, v));
        } else if (key == "out") c.out = single();
        else if (key == "workers") c.workers = parse_count(key, single());
        else throw ConfigError("unknown experiment key '" + key + "'");
      } else if (section == "probe") {
        const std::string& v = single();
        if (key == "kind") {
          bool ok = false;
          for (ProbeKind k : {ProbeKind::kNone, ProbeKind::kJacobian, ProbeKind::kMixing, ProbeKind::kFlatVsDeep})
            if (v == probe_kind_name(k)) {
              c.probe.kind = k;
              ok = true;
            }
          if (!ok) throw ConfigError("invalid value '" + v + "' for kind (expected none|jacobian|mixing|flat_vs_deep)");
        } else if (key == "instances") c.probe.instances = parse_count(key, v);
        else if (key == "min_depth") c.probe.min_depth = parse_count(key, v);
        else if (key == "max_depth") c.probe.max_depth = parse_count(key, v);
        else if (key == "feature_dim") c.probe.feature_dim = parse_count(key, v);
        else if (key == "hidden") c.probe.hidden = parse_count(key, v);
        else throw ConfigError("unknown probe key '" + key + "'");
      } else if (section == "report") {
        const std::string& v = single();
        if (key == "figure") c.report.figure = v;
        else if (key == "x") c.report.x = v;
        else if (key == "x_label") c.report.x_label = v;
        else if (key == "y_label") c.report.y_label = v;
        else if (key == "log_x") c.report.log_x = parse_bool(key, v);
        else if (key == "log_y") c.report.log_y = parse_bool(key, v);
        else throw ConfigError("unknown report key '" + key + "'");
      }
    } catch (const ConfigError& e) {
      if (e.line()) throw;
      const bool key_problem = std::string(e.what()).rfind("unknown", 0) == 0;
      throw ConfigError(e.what(), line_no, key_problem ? col : vcol);
    }
  }
  if (c.models.empty()) c.models.push_back({"default", ModelConfig{}, false});
  if (c.seeds.empty()) throw ConfigError("experiment.seeds must not be empty");
  if (c.workers < 1) throw ConfigError("experiment.workers must be >= 1");
  // validate sweep axes by applying every value to a scratch copy
  for (const auto& ax : c.sweep) {
    if (ax.values.empty()) throw ConfigError("sweep axis '" + ax.key + "' is empty");
    for (const auto& v : ax.values) {
      ExperimentConfig scratch = c;
      apply_axis(scratch, ax.key, v);
    }
  }
  c.train.validate();
  for (const auto& m : c.models) {
    ModelConfig mc = m.config;
    if (m.auto_layers) mc.layers = 1;
    mc.validate();
  }
  return c;
}

inline ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str());
}

/// Canonical text with every key resolved; parse_config_text(emit(c)) == c.
inline std::string emit_config(const ExperimentConfig& c) {
  std::ostringstream os;
  auto block = [&](const std::string& header, const std::vector<std::pair<std::string, std::string>>& items) {
    os << '[' << header << "]\n";
    for (const auto& [k, v] : items) os << k << " = " << v << '\n';
    os << '\n';
  };
  block("task", task_items(c.task, c.sizes, c.task_seed));
  for (const auto& m : c.models) {
    auto items = model_config_items(m.config);
    if (m.auto_layers)
      for (auto& [k, v] : items)
        if (k == "layers") v = "auto";
    block(m.name == "default" ? "model" : "model:" + m.name, items);
  }
  block("train", train_items(c.train));
  {
    std::vector<std::pair<std::string, std::string>> items;
    for (const auto& ax : c.sweep) {
      std::string v;
      for (const auto& x : ax.values) v += (v.empty() ? "" : ", ") + x;
      items.emplace_back(ax.key, v);
    }
    block("sweep", items);
  }
  std::string seeds;
  for (auto s : c.seeds) seeds += (seeds.empty() ? "" : ", ") + std::to_string(s);
  block("experiment", {{"seeds", seeds}, {"out", c.out}, {"workers", std::to_string(c.workers)}});
  block("probe", {{"kind", probe_kind_name(c.probe.kind)},
                  {"instances", std::to_string(c.probe.instances)},
                  {"min_depth", std::to_string(c.probe.min_depth)},
                  {"max_depth", std::to_string(c.probe.max_depth)},
                  {"feature_dim", std::to_string(c.probe.feature_dim)},
                  {"hidden", std::to_string(c.probe.hidden)}});
  block("report", {{"figure", c.report.figure},
                   {"x", c.report.x},
                   {"x_label", c.report.x_label},
                   {"y_label", c.report.y_label},
                   {"log_x", c.report.log_x ? "true" : "false"},
                   {"log_y", c.report.log_y ? "true" : "false"}});
  return os.str();
}

inline bool same_config(const ExperimentConfig& a, const ExperimentConfig& b) { return emit_config(a) == emit_config(b); }

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Canonical text of everything that determines a run's results.
inline std::string run_text(const RunSpec& r) {
  std::ostringstream os;
  os << "[task]\n";
  for (const auto& [k, v] : task_items(r.task, r.sizes, r.task_seed)) os << k << " = " << v << '\n';
  os << "[model]\n" << model_config_text(r.model) << "[train]\n";
  for (const auto& [k, v] : train_items(r.train)) os << k << " = " << v << '\n';
  os << "seed = " << r.seed << '\n';
  return os.str();
}

/// Hash of the run configuration excluding the seed (shared by all seeds of a
/// sweep point and model).
inline std::string run_config_hash(const RunSpec& r) {
  RunSpec copy = r;
  copy.seed = 0;
  return hex64(fnv1a(run_text(copy)));
}

/// Cartesian product: sweep axes in declaration order (first axis slowest),
/// then models, then seeds.
inline std::vector<RunSpec> expand_runs(const ExperimentConfig& c) {
  std::vector<RunSpec> out;
  std::vector<std::size_t> pos(c.sweep.size(), 0);
  while (true) {
    ExperimentConfig point = c;
    std::map<std::string, std::string> labels;
    for (std::size_t a = 0; a < c.sweep.size(); ++a) {
      detail::apply_axis(point, c.sweep[a].key, c.sweep[a].values[pos[a]]);
      labels[c.sweep[a].key] = c.sweep[a].values[pos[a]];
    }
    for (const auto& m : point.models) {
      for (std::uint64_t seed : c.seeds) {
        RunSpec r;
        r.model_name = m.name;
        r.task = point.task;
        r.sizes = point.sizes;
        r.task_seed = point.task_seed;
        r.model = m.config;
        if (m.auto_layers) r.model.layers = task_required_depth(point.task);
        configure_model_for_task(r.model, point.task);
        r.model.validate();
        r.train = point.train;
        r.train.seed = seed;
        r.seed = seed;
        r.point = labels;
        r.point["model"] = m.name;
        out.push_back(std::move(r));
      }
    }
    std::size_t a = c.sweep.size();
    while (a > 0) {
      --a;
      if (++pos[a] < c.sweep[a].values.size()) break;
      pos[a] = 0;
      if (a == 0) return out;
    }
    if (c.sweep.empty()) return out;
  }
}

/// Replaces every seed (training seeds and the task seed) with `seed`.
inline void override_seeds(ExperimentConfig& c, std::uint64_t seed) {
  c.seeds = {seed};
  c.task_seed = seed;
}

}  // namespace glstm
