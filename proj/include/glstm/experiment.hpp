#pragma once

// Experiment execution: resolved runs in a worker pool, skipping runs whose
// report already exists, followed by single-threaded aggregation into figure
// CSVs. Probes reuse the trained checkpoints.
//
// Output directory layout (H = run config hash, E = experiment hash):
//   experiment-E.cfg                  resolved config
//   run-H-sSEED.json                  RunReport (written last, marks completion)
//   run-H-sSEED.ckpt                  best-validation parameters
//   run-H-sSEED.metrics.csv           per-epoch metrics
//   run-H-sSEED.error.txt             reason a run failed
//   fig-METRIC-E.csv                  x,series,mean,std,n
//   probe-KIND-E.csv                  task,model,x,seed,metric,mean,std
//   status-E.txt                      "complete" or "partial", then counts

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "glstm/checkpoint.hpp"
#include "glstm/config.hpp"
#include "glstm/probes.hpp"
#include "glstm/report.hpp"
#include "glstm/train.hpp"

namespace glstm {

namespace fs = std::filesystem;

inline std::string experiment_hash(const ExperimentConfig& c) { return hex64(fnv1a(emit_config(c))); }

inline std::string run_stem(const RunSpec& r) { return "run-" + run_config_hash(r) + "-s" + std::to_string(r.seed); }

/// Writes through a temporary file and renames, so readers never see a
/// partially written file.
inline void write_file_atomic(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    os << content;
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct RunOutcome {
  RunSpec spec;
  RunReport report;
  bool ok = false;
  /// Loaded from an earlier invocation instead of trained.
  bool skipped = false;
  std::string error;
};

struct ExperimentResult {
  std::string hash;
  fs::path out;
  std::vector<RunOutcome> runs;
  std::size_t trained = 0;
  std::size_t skipped = 0;
  std::size_t failed = 0;
  /// Optimizer steps taken in this invocation.
  std::size_t steps = 0;
  bool partial() const { return failed > 0; }
};

struct RunOptions {
  /// Overrides config workers when nonzero.
  std::size_t workers = 0;
  std::ostream* log = nullptr;
};

namespace detail {

class Logger {
 public:
  explicit Logger(std::ostream* os) : os_(os) {}
  void line(const std::string& s) {
    if (!os_) return;
    std::lock_guard<std::mutex> lock(mu_);
    *os_ << s << '\n' << std::flush;
  }

 private:
  std::ostream* os_;
  std::mutex mu_;
};

/// Runs f(i) for i in [0, n) on up to `workers` threads.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& f) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) f(i);
    });
  for (auto& t : pool) t.join();
}

/// Numeric x for a run label; non-numeric labels map to their position among
/// the axis values.
inline double x_value(const ExperimentConfig& c, const RunSpec& r) {
  const auto it = r.point.find(c.report.x);
  if (it == r.point.end()) return 0.0;
  try {
    std::size_t pos = 0;
    const double v = std::stod(it->second, &pos);
    if (pos == it->second.size()) return v;
  } catch (const std::exception&) {
  }
  for (const auto& ax : c.sweep)
    if (ax.key == c.report.x)
      for (std::size_t i = 0; i < ax.values.size(); ++i)
        if (ax.values[i] == it->second) return static_cast<double>(i + 1);
  return 0.0;
}

/// Series name: model name plus every sweep label other than x.
inline std::string series_name(const ExperimentConfig& c, const RunSpec& r) {
  std::string s = r.model_name;
  for (const auto& ax : c.sweep)
    if (ax.key != c.report.x) s += " " + ax.key.substr(ax.key.find('.') + 1) + "=" + r.point.at(ax.key);
  return s;
}

struct Accumulator {
  std::map<std::pair<std::string, double>, std::vector<double>> cells;
  std::vector<std::string> order;

  void add(const std::string& series, double x, double v) {
    if (std::find(order.begin(), order.end(), series) == order.end()) order.push_back(series);
    cells[{series, x}].push_back(v);
  }

  std::vector<Series> series() const {
    std::vector<Series> out;
    for (const auto& name : order) {
      Series s{name, {}};
      for (const auto& [key, vals] : cells) {
        if (key.first != name) continue;
        const Summary sm = summarize(vals);
        s.points.push_back({key.second, sm.mean, sm.std, sm.n});
      }
      out.push_back(std::move(s));
    }
    return out;
  }
};

inline void write_figure_file(const fs::path& path, const std::vector<Series>& series) {
  std::ostringstream os;
  write_figure_csv(os, series);
  write_file_atomic(path, os.str());
}

}  // namespace detail

/// Trains one run, or loads its report when already complete.
inline RunOutcome execute_run(const RunSpec& spec, const fs::path& out, detail::Logger& log) {
  RunOutcome o;
  o.spec = spec;
  const std::string stem = run_stem(spec);
  const fs::path report_path = out / (stem + ".json");
  try {
    if (fs::exists(report_path)) {
      o.report = run_report_from_json(nlohmann::json::parse(read_file(report_path)));
      o.skipped = true;
      o.ok = !o.report.aborted;
      if (!o.ok) o.error = o.report.abort_reason;
      log.line("skip  " + stem + " (complete)");
      return o;
    }
    log.line("train " + stem);
    const TaskSplit split = generate_split(spec.task, spec.sizes, spec.task_seed);
    TrainResult tr = train(spec.model, split, spec.train);
    tr.report.config_hash = run_config_hash(spec);
    tr.report.labels = spec.point;
    save_checkpoint(out / (stem + ".ckpt"), spec.model, tr.params);
    std::ostringstream csv;
    write_metrics_csv(csv, tr.report);
    write_file_atomic(out / (stem + ".metrics.csv"), csv.str());
    write_file_atomic(report_path, to_json(tr.report).dump(2) + "\n");
    o.report = std::move(tr.report);
    o.ok = !o.report.aborted;
    if (!o.ok) o.error = o.report.abort_reason;
    log.line("done  " + stem + " " + o.report.metric + "=" + format_real(o.report.test_metric));
  } catch (const std::exception& e) {
    o.ok = false;
    o.error = e.what();
    write_file_atomic(out / (stem + ".error.txt"), o.error + "\n");
    log.line("FAIL  " + stem + ": " + o.error);
  }
  return o;
}

/// Executes every (sweep point x model x seed) run and writes the aggregate
/// figure CSVs (test metric and parameter count).
inline ExperimentResult run_experiment(const ExperimentConfig& c, const fs::path& out, const RunOptions& opt = {}) {
  ExperimentResult res;
  res.hash = experiment_hash(c);
  res.out = out;
  fs::create_directories(out);
  write_file_atomic(out / ("experiment-" + res.hash + ".cfg"), emit_config(c));
  const std::vector<RunSpec> runs = expand_runs(c);
  detail::Logger log(opt.log);
  res.runs.resize(runs.size());
  detail::parallel_for(runs.size(), opt.workers ? opt.workers : c.workers,
                       [&](std::size_t i) { res.runs[i] = execute_run(runs[i], out, log); });

  detail::Accumulator metric, params;
  for (const auto& r : res.runs) {
    if (!r.ok) {
      ++res.failed;
      continue;
    }
    if (r.skipped) ++res.skipped;
    else {
      ++res.trained;
      res.steps += r.report.steps;
    }
    const double x = detail::x_value(c, r.spec);
    const std::string s = detail::series_name(c, r.spec);
    metric.add(s, x, r.report.test_metric);
    params.add(s, x, static_cast<double>(r.report.parameter_count));
  }
  if (res.failed < res.runs.size()) {
    detail::write_figure_file(out / ("fig-test_metric-" + res.hash + ".csv"), metric.series());
    detail::write_figure_file(out / ("fig-parameter_count-" + res.hash + ".csv"), params.series());
  }
  std::ostringstream status;
  status << (res.partial() ? "partial" : "complete") << "\nruns " << res.runs.size() << "\ntrained " << res.trained
         << "\nskipped " << res.skipped << "\nfailed " << res.failed << '\n';
  for (const auto& r : res.runs)
    if (!r.ok) status << "failed " << run_stem(r.spec) << ": " << r.error << '\n';
  write_file_atomic(out / ("status-" + res.hash + ".txt"), status.str());
  return res;
}

/// Saves the split of every distinct task point under data-TASKHASH/.
inline std::vector<fs::path> generate_data(const ExperimentConfig& c, const fs::path& out, std::ostream* log = nullptr) {
  std::vector<fs::path> dirs;
  std::set<std::string> seen;
  for (const auto& r : expand_runs(c)) {
    std::string text;
    for (const auto& [k, v] : task_items(r.task, r.sizes, r.task_seed)) text += k + "=" + v + "\n";
    const fs::path dir = out / ("data-" + hex64(fnv1a(text)));
    if (!seen.insert(dir.string()).second) continue;
    save_split(generate_split(r.task, r.sizes, r.task_seed), dir);
    write_file_atomic(dir / "task.txt", text);
    if (log) *log << "wrote " << dir.string() << '\n';
    dirs.push_back(dir);
  }
  return dirs;
}

// ---------------------------------------------------------------------------
// Probes over trained runs

struct ProbeResult {
  std::vector<ProbeRow> rows;
  /// Figure metric name -> series.
  std::map<std::string, std::vector<Series>> figures;
};

inline ProbeResult run_flat_vs_deep(const ExperimentConfig& c) {
  ProbeResult pr;
  const auto depths = flat_vs_deep_probe(c.probe.min_depth, c.probe.max_depth, c.seeds, c.probe.feature_dim,
                                         c.probe.hidden);
  Series tree{"binary tree", {}}, star{"star", {}};
  for (const auto& d : depths) {
    pr.rows.push_back({"flat_vs_deep", "gcn", static_cast<double>(d.depth), c.seeds.front(), "tree_log10_jacobian",
                       d.tree.mean, d.tree.std});
    pr.rows.push_back({"flat_vs_deep", "gcn", static_cast<double>(d.depth), c.seeds.front(), "star_log10_jacobian",
                       d.star.mean, d.star.std});
    tree.points.push_back({static_cast<double>(d.depth), d.tree.mean, d.tree.std, d.tree.n});
    star.points.push_back({static_cast<double>(d.depth), d.star.mean, d.star.std, d.star.n});
  }
  pr.figures["flat_vs_deep"] = {tree, star};
  return pr;
}

/// Jacobian or mixing probes on the first probe.instances test instances of
/// every successful run (training them first if needed).
inline ProbeResult run_probes(const ExperimentConfig& c, const fs::path& out, const RunOptions& opt = {},
                              ExperimentResult* trained = nullptr) {
  if (c.probe.kind == ProbeKind::kFlatVsDeep) return run_flat_vs_deep(c);
  if (c.probe.kind == ProbeKind::kNone) throw ConfigError("probe.kind is none; nothing to probe");
  if (c.task.kind != TaskKind::kNar && c.task.kind != TaskKind::kNarr)
    throw ConfigError("jacobian and mixing probes need a nar or narr task");
  if (c.probe.kind == ProbeKind::kMixing && c.task.kind != TaskKind::kNar)
    throw ConfigError("the mixing probe is defined for the nar task");
  ExperimentResult er = run_experiment(c, out, opt);
  detail::Logger log(opt.log);
  const std::string ehash = er.hash;
  std::vector<std::vector<ProbeRow>> rows(er.runs.size());
  std::vector<std::map<std::string, std::vector<double>>> values(er.runs.size());
  detail::parallel_for(er.runs.size(), opt.workers ? opt.workers : c.workers, [&](std::size_t i) {
    const RunOutcome& r = er.runs[i];
    if (!r.ok) return;
    const std::string stem = run_stem(r.spec);
    const Checkpoint ck = load_checkpoint(out / (stem + ".ckpt"));
    auto test = generate_instances(r.spec.task, std::min(c.probe.instances, r.spec.sizes.test),
                                   part_seed(r.spec.task_seed, SplitPart::kTest));
    const std::string task = task_name(r.spec.task.kind);
    const double x = detail::x_value(c, r.spec);
    auto row = [&](const std::string& metric, const Summary& s) {
      rows[i].push_back({task, detail::series_name(c, r.spec), x, r.spec.seed, metric, s.mean, s.std});
    };
    if (c.probe.kind == ProbeKind::kJacobian) {
      const JacobianReport jr = jacobian_report(ck.config, ck.params, test);
      row("jacobian_selected", jr.selected);
      row("jacobian_background", jr.background);
      row("jacobian_ratio", jr.ratio);
      for (const auto& ij : jr.instances) {
        values[i]["jacobian_selected"].push_back(ij.selected);
        if (ij.norms.size() > 1) values[i]["jacobian_background"].push_back(ij.background);
        values[i]["jacobian_ratio"].push_back(ij.ratio);
      }
    } else {
      const MixingReport mr = mixing_report(ck.config, ck.params, test);
      row("mixing", mr.summary);
      for (const auto& v : mr.values) values[i]["mixing"].insert(values[i]["mixing"].end(), v.begin(), v.end());
    }
    log.line("probe " + stem);
  });
  ProbeResult pr;
  std::map<std::string, detail::Accumulator> acc;
  for (std::size_t i = 0; i < er.runs.size(); ++i) {
    pr.rows.insert(pr.rows.end(), rows[i].begin(), rows[i].end());
    if (!er.runs[i].ok) continue;
    const double x = detail::x_value(c, er.runs[i].spec);
    const std::string s = detail::series_name(c, er.runs[i].spec);
    for (const auto& [metric, vals] : values[i])
      for (double v : vals) acc[metric].add(s, x, v);
  }
  for (const auto& [metric, a] : acc) pr.figures[metric] = a.series();
  if (trained) *trained = std::move(er);
  return pr;
}

inline void write_probe_outputs(const ExperimentConfig& c, const fs::path& out, const ProbeResult& pr) {
  const std::string h = experiment_hash(c);
  fs::create_directories(out);
  std::ostringstream os;
  write_probe_csv(os, pr.rows);
  write_file_atomic(out / ("probe-" + std::string(probe_kind_name(c.probe.kind)) + "-" + h + ".csv"), os.str());
  for (const auto& [metric, series] : pr.figures)
    detail::write_figure_file(out / ("fig-" + metric + "-" + h + ".csv"), series);
}

// ---------------------------------------------------------------------------
// Ablations

/// Gate and aggregation ablations of every gLSTM model in the config.
inline ExperimentConfig ablation_config(const ExperimentConfig& c) {
  ExperimentConfig a = c;
  a.models.clear();
  for (const auto& m : c.models) {
    if (m.config.arch != Architecture::kGlstm) {
      a.models.push_back(m);
      continue;
    }
    auto variant = [&](const std::string& suffix, auto edit) {
      ModelSpec v = m;
      v.name = m.name + suffix;
      edit(v.config);
      a.models.push_back(v);
    };
    variant("", [](ModelConfig&) {});
    variant("-output_gate", [](ModelConfig& x) { x.output_gate = false; });
    variant("-input_gate", [](ModelConfig& x) { x.input_gate = false; });
    variant("-forget_gate", [](ModelConfig& x) { x.forget_gate = false; });
    variant("-all_gates", [](ModelConfig& x) { x.input_gate = x.forget_gate = x.output_gate = false; });
    variant("-k_hop", [](ModelConfig& x) { x.k_hop = false; });
  }
  return a;
}

// ---------------------------------------------------------------------------
// Reports

struct FigureDefaults {
  const char* id;
  const char* metric;
  PlotKind kind;
};

inline constexpr FigureDefaults kFigures[] = {
    {"fig5a", "test_metric", PlotKind::kLineBand},     {"fig5b", "parameter_count", PlotKind::kLineBand},
    {"fig6a", "jacobian_selected", PlotKind::kLineBand}, {"fig6b", "jacobian_ratio", PlotKind::kLineBand},
    {"fig7", "mixing", PlotKind::kLineBand},           {"fig2", "flat_vs_deep", PlotKind::kLineBand},
    {"fig9", "test_metric", PlotKind::kLineBand},      {"table1-desk", "test_metric", PlotKind::kBar}};

inline FigureSpec figure_spec(const ExperimentConfig& c, const fs::path& out) {
  for (const auto& f : kFigures)
    if (c.report.figure == f.id) {
      FigureSpec s;
      s.id = f.id;
      s.kind = f.kind;
      s.title = f.id;
      s.x_label = c.report.x_label;
      s.y_label = c.report.y_label;
      s.log_x = c.report.log_x;
      s.log_y = c.report.log_y;
      s.inputs = {out / ("fig-" + std::string(f.metric) + "-" + experiment_hash(c) + ".csv")};
      if (c.report.figure == "fig6a")
        s.inputs.push_back(out / ("fig-jacobian_background-" + experiment_hash(c) + ".csv"));
      return s;
    }
  throw ConfigError("unknown figure '" + c.report.figure + "'");
}

/// Renders the configured figure from the CSVs already in `out`.
inline fs::path emit_configured_report(const ExperimentConfig& c, const fs::path& out) {
  FigureSpec s = figure_spec(c, out);
  if (c.report.figure == "fig6a") {
    // label the two inputs so their series stay distinct
    std::vector<Series> all;
    const char* tags[] = {" selected", " background"};
    for (std::size_t i = 0; i < s.inputs.size(); ++i) {
      std::ifstream is(s.inputs[i]);
      if (!is) throw ReportError("figure 'fig6a': missing input " + s.inputs[i].string());
      for (auto& series : read_figure_csv(is, s.inputs[i].string())) {
        series.name += tags[i];
        all.push_back(std::move(series));
      }
    }
    write_file_atomic(out / "fig6a.svg", render_svg(s, all));
    std::ostringstream csv;
    write_figure_csv(csv, all);
    write_file_atomic(out / "fig6a.csv", csv.str());
  } else {
    emit_report(s, out);
  }
  return out / (s.id + ".svg");
}

}  // namespace glstm
