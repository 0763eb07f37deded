// glstm_lab: task generation, training, sweeps, probes, ablations, figures.
//
// exit codes: 0 success, 1 config error, 2 run failure, 3 partial aggregate

#include <CLI11.hpp>

#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <optional>

#include "glstm/glstm.hpp"

namespace {

using glstm::ExperimentConfig;
using glstm::ExperimentResult;

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRunFailure = 2;
constexpr int kPartial = 3;

struct Common {
  std::string config;
  std::string out;
  std::size_t workers = 0;
  std::optional<std::uint64_t> seed_override;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "experiment config file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", c.out, "output directory (default: config out)");
  cmd->add_option("--workers", c.workers, "parallel runs (default: config workers)");
  cmd->add_option("--seed-override", c.seed_override, "replace all seeds with K");
}

struct Loaded {
  ExperimentConfig cfg;
  std::filesystem::path out;
};

Loaded load(const Common& c) {
  Loaded l{glstm::parse_config(c.config), {}};
  if (const char* env = std::getenv("GLSTM_LAB_SEED"); env && *env) {
    try {
      glstm::override_seeds(l.cfg, std::stoull(env));
    } catch (const std::exception&) {
      throw glstm::ConfigError(std::string("GLSTM_LAB_SEED: not an integer: ") + env);
    }
  }
  if (c.seed_override) glstm::override_seeds(l.cfg, *c.seed_override);
  l.out = c.out.empty() ? std::filesystem::path(l.cfg.out) : std::filesystem::path(c.out);
  return l;
}

void print_runs(const ExperimentResult& r) {
  for (const auto& run : r.runs) {
    std::cout << std::left << std::setw(34) << glstm::run_stem(run.spec) << ' ' << std::setw(22) << run.spec.model_name;
    if (run.ok)
      std::cout << ' ' << run.report.metric << '=' << glstm::format_real(run.report.test_metric)
                << " params=" << run.report.parameter_count << (run.skipped ? " (cached)" : "");
    else
      std::cout << " FAILED: " << run.error;
    std::cout << '\n';
  }
  std::cout << "trained " << r.trained << ", cached " << r.skipped << ", failed " << r.failed << "; out "
            << r.out.string() << '\n';
}

int status(const ExperimentResult& r) {
  if (r.failed == 0) return kOk;
  return r.failed == r.runs.size() ? kRunFailure : kPartial;
}

int cmd_gen(const Common& c) {
  const Loaded l = load(c);
  glstm::generate_data(l.cfg, l.out, &std::cout);
  return kOk;
}

int cmd_train(const Common& c, bool sweep) {
  const Loaded l = load(c);
  if (!sweep && !l.cfg.sweep.empty())
    throw glstm::ConfigError("train expects a config without [sweep]; use the sweep subcommand");
  const ExperimentResult r = glstm::run_experiment(l.cfg, l.out, {c.workers, &std::cerr});
  print_runs(r);
  return status(r);
}

int cmd_probe(const Common& c) {
  const Loaded l = load(c);
  ExperimentResult trained;
  const glstm::ProbeResult pr = glstm::run_probes(l.cfg, l.out, {c.workers, &std::cerr}, &trained);
  glstm::write_probe_outputs(l.cfg, l.out, pr);
  for (const auto& row : pr.rows)
    std::cout << row.model << " x=" << glstm::format_real(row.x) << " seed=" << row.seed << ' ' << row.metric << ' '
              << glstm::format_real(row.mean) << " +- " << glstm::format_real(row.std) << '\n';
  if (l.cfg.probe.kind == glstm::ProbeKind::kFlatVsDeep) return kOk;
  return status(trained);
}

int cmd_ablate(const Common& c) {
  Loaded l = load(c);
  l.cfg = glstm::ablation_config(l.cfg);
  const ExperimentResult r = glstm::run_experiment(l.cfg, l.out, {c.workers, &std::cerr});
  print_runs(r);
  return status(r);
}

int cmd_report(const Common& c) {
  const Loaded l = load(c);
  std::cout << glstm::emit_configured_report(l.cfg, l.out).string() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gLSTM associative-memory MPNN lab"};
  app.require_subcommand(1);
  Common common;
  auto* gen = app.add_subcommand("gen", "generate and save task splits");
  auto* train = app.add_subcommand("train", "train every model/seed of a config without sweep axes");
  auto* sweep = app.add_subcommand("sweep", "train all sweep points and aggregate");
  auto* probe = app.add_subcommand("probe", "sensitivity probes on trained runs (or flat vs deep)");
  auto* report = app.add_subcommand("report", "render the configured figure from aggregate CSVs");
  auto* ablate = app.add_subcommand("ablate", "gate and k-hop ablations of every gLSTM model");
  for (auto* cmd : {gen, train, sweep, probe, report, ablate}) add_common(cmd, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    if (gen->parsed()) return cmd_gen(common);
    if (train->parsed()) return cmd_train(common, false);
    if (sweep->parsed()) return cmd_train(common, true);
    if (probe->parsed()) return cmd_probe(common);
    if (report->parsed()) return cmd_report(common);
    if (ablate->parsed()) return cmd_ablate(common);
  } catch (const glstm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const glstm::ReportError& e) {
    std::cerr << "report error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRunFailure;
  }
  return kConfigError;
}
