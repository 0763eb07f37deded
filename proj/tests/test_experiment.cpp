#include <gtest/gtest.h>

#include "glstm/experiment.hpp"
#include "test_util.hpp"

using namespace glstm;
namespace fs = std::filesystem;

namespace {

const char* kTiny =
    "[task]\nname = nar\nneighbors = 1\ntrain_size = 24\nvalidation_size = 8\ntest_size = 8\n"
    "[model]\narch = glstm\nhidden = 8\nmemory = 4\n[train]\nepochs = 2\nbatch_size = 8\n";

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("glstm_experiment_" + name);
  fs::remove_all(d);
  return d;
}

}  // namespace

TEST(Experiment, SingleNarRunOfOneNeighborIsPerfect) {
  const fs::path out = scratch_dir("single");
  const ExperimentConfig c = parse_config_text(kTiny);
  const ExperimentResult r = run_experiment(c, out);
  ASSERT_EQ(r.runs.size(), 1u);
  EXPECT_TRUE(r.runs[0].ok) << r.runs[0].error;
  EXPECT_EQ(r.runs[0].report.metric, "accuracy");
  EXPECT_EQ(r.runs[0].report.test_metric, 1.0);
  EXPECT_EQ(r.trained, 1u);
  EXPECT_FALSE(r.partial());
  EXPECT_GT(r.steps, 0u);
}

TEST(Experiment, ArtifactNamesCarryHashes) {
  const fs::path out = scratch_dir("names");
  const ExperimentConfig c = parse_config_text(kTiny);
  const ExperimentResult r = run_experiment(c, out);
  const std::string h = run_config_hash(expand_runs(c)[0]);
  for (const char* ext : {".json", ".ckpt", ".metrics.csv"})
    EXPECT_TRUE(fs::exists(out / ("run-" + h + "-s0" + ext))) << ext;
  EXPECT_EQ(r.hash, experiment_hash(c));
  EXPECT_TRUE(fs::exists(out / ("experiment-" + r.hash + ".cfg")));
  EXPECT_TRUE(fs::exists(out / ("fig-test_metric-" + r.hash + ".csv")));
  EXPECT_TRUE(fs::exists(out / ("status-" + r.hash + ".txt")));
  for (const auto& e : fs::directory_iterator(out)) {
    const std::string name = e.path().filename().string();
    EXPECT_TRUE(name.find(h) != std::string::npos || name.find(r.hash) != std::string::npos) << name;
    EXPECT_EQ(name.find(".tmp"), std::string::npos) << name;
  }
  // the stored config reproduces the experiment
  EXPECT_TRUE(same_config(parse_config(out / ("experiment-" + r.hash + ".cfg")), c));
}

TEST(Experiment, ReinvocationTrainsNothing) {
  const fs::path out = scratch_dir("idempotent");
  const ExperimentConfig c = parse_config_text(std::string(kTiny) + "[sweep]\ntask.neighbors = 1, 2\n");
  const ExperimentResult first = run_experiment(c, out);
  EXPECT_EQ(first.trained, 2u);
  const std::string fig = out / ("fig-test_metric-" + first.hash + ".csv");
  const std::string csv = test::slurp(fig);
  const ExperimentResult again = run_experiment(c, out);
  EXPECT_EQ(again.trained, 0u);
  EXPECT_EQ(again.skipped, 2u);
  EXPECT_EQ(again.steps, 0u);
  EXPECT_EQ(test::slurp(fig), csv);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(again.runs[i].report.test_metric, first.runs[i].report.test_metric);
}

TEST(Experiment, DivergedRunMarksAggregatePartial) {
  const fs::path out = scratch_dir("partial");
  const ExperimentConfig c =
      parse_config_text(std::string(kTiny) + "grad_clip = 0\n[sweep]\ntask.neighbors = 2\ntrain.lr = 1e-3, 1e300\n");
  const ExperimentResult r = run_experiment(c, out);
  ASSERT_EQ(r.runs.size(), 2u);
  EXPECT_TRUE(r.runs[0].ok);
  EXPECT_FALSE(r.runs[1].ok);
  EXPECT_FALSE(r.runs[1].error.empty());
  EXPECT_EQ(r.failed, 1u);
  EXPECT_TRUE(r.partial());
  const std::string status = test::slurp(out / ("status-" + r.hash + ".txt"));
  EXPECT_EQ(status.substr(0, 7), "partial");
  EXPECT_NE(status.find(run_stem(r.runs[1].spec)), std::string::npos);
  // the failure is recorded, not retried
  const ExperimentResult again = run_experiment(c, out);
  EXPECT_EQ(again.trained, 0u);
  EXPECT_EQ(again.failed, 1u);
}

TEST(Experiment, WorkerCountDoesNotChangeResults) {
  const ExperimentConfig c =
      parse_config_text(std::string(kTiny) + "[sweep]\ntask.neighbors = 2, 3\n[experiment]\nseeds = 0, 1\n");
  const fs::path a = scratch_dir("workers1"), b = scratch_dir("workers3");
  RunOptions one, three;
  one.workers = 1;
  three.workers = 3;
  const ExperimentResult ra = run_experiment(c, a, one);
  const ExperimentResult rb = run_experiment(c, b, three);
  ASSERT_EQ(ra.runs.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string stem = run_stem(ra.runs[i].spec);
    EXPECT_EQ(test::slurp(a / (stem + ".metrics.csv")), test::slurp(b / (stem + ".metrics.csv")));
    EXPECT_EQ(test::slurp(a / (stem + ".ckpt")), test::slurp(b / (stem + ".ckpt")));
  }
  EXPECT_EQ(test::slurp(a / ("fig-test_metric-" + ra.hash + ".csv")),
            test::slurp(b / ("fig-test_metric-" + rb.hash + ".csv")));
}

TEST(Experiment, AggregateHasMeanAndStdPerPoint) {
  const fs::path out = scratch_dir("aggregate");
  const ExperimentConfig c =
      parse_config_text(std::string(kTiny) + "[sweep]\ntask.neighbors = 1, 2\n[experiment]\nseeds = 0, 1, 2\n");
  const ExperimentResult r = run_experiment(c, out);
  std::ifstream is(out / ("fig-test_metric-" + r.hash + ".csv"));
  const auto series = read_figure_csv(is);
  ASSERT_EQ(series.size(), 1u);
  ASSERT_EQ(series[0].points.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) {
    std::vector<double> v;
    for (const auto& run : r.runs)
      if (run.spec.task.neighbors == k + 1) v.push_back(run.report.test_metric);
    ASSERT_EQ(v.size(), 3u);
    const double mean = (v[0] + v[1] + v[2]) / 3;
    double ss = 0;
    for (double x : v) ss += (x - mean) * (x - mean);
    EXPECT_EQ(series[0].points[k].x, static_cast<double>(k + 1));
    EXPECT_NEAR(series[0].points[k].mean, mean, 1e-12);
    EXPECT_NEAR(series[0].points[k].std, std::sqrt(ss / 3), 1e-12);  // population std
    EXPECT_EQ(series[0].points[k].n, 3u);
  }
}

TEST(Experiment, JacobianProbeReusesCheckpoints) {
  const fs::path out = scratch_dir("probe");
  const ExperimentConfig c =
      parse_config_text(std::string(kTiny) + "[probe]\nkind = jacobian\ninstances = 4\n[sweep]\ntask.neighbors = 2\n");
  ExperimentResult er;
  const ProbeResult pr = run_probes(c, out, {}, &er);
  EXPECT_EQ(er.trained, 1u);
  EXPECT_EQ(pr.rows.size(), 3u);
  EXPECT_EQ(pr.figures.count("jacobian_ratio"), 1u);
  write_probe_outputs(c, out, pr);
  EXPECT_TRUE(fs::exists(out / ("probe-jacobian-" + experiment_hash(c) + ".csv")));
  ExperimentResult again;
  run_probes(c, out, {}, &again);
  EXPECT_EQ(again.trained, 0u);
}

TEST(Experiment, ProbeKindMustFitTask) {
  const fs::path out = scratch_dir("probe_errors");
  EXPECT_THROW(run_probes(parse_config_text(kTiny), out), ConfigError);
  EXPECT_THROW(run_probes(parse_config_text("[task]\nname = ring_transfer\n[probe]\nkind = mixing\n"), out),
               ConfigError);
}

TEST(Experiment, AblationVariants) {
  const ExperimentConfig c = parse_config_text("[model:g]\narch = glstm\n[model:c]\narch = gcn\n");
  const ExperimentConfig a = ablation_config(c);
  ASSERT_EQ(a.models.size(), 7u);
  EXPECT_EQ(a.models[0].name, "g");
  EXPECT_FALSE(a.models[1].config.output_gate);
  EXPECT_FALSE(a.models[2].config.input_gate);
  EXPECT_FALSE(a.models[3].config.forget_gate);
  EXPECT_FALSE(a.models[4].config.input_gate || a.models[4].config.forget_gate || a.models[4].config.output_gate);
  EXPECT_FALSE(a.models[5].config.k_hop);
  EXPECT_TRUE(a.models[5].config.output_gate);
  EXPECT_EQ(a.models[6].name, "c");
}

TEST(Experiment, GenerateDataWritesOneDirectoryPerTaskPoint) {
  const fs::path out = scratch_dir("gen");
  const ExperimentConfig c =
      parse_config_text(std::string(kTiny) + "[sweep]\ntask.neighbors = 1, 2\n[experiment]\nseeds = 0, 1\n");
  const auto dirs = generate_data(c, out);
  ASSERT_EQ(dirs.size(), 2u);
  for (const auto& d : dirs) EXPECT_TRUE(fs::exists(d / "task.txt"));
  EXPECT_EQ(load_split_part(dirs[1], "train").size(), 24u);
  EXPECT_EQ(load_split_part(dirs[1], "test").size(), 8u);
}

TEST(Experiment, ConfiguredReportIsByteStable) {
  const fs::path out = scratch_dir("report");
  const ExperimentConfig c = parse_config_text(std::string(kTiny) +
                                               "[sweep]\ntask.neighbors = 1, 2\n[report]\nfigure = fig5a\n"
                                               "x = task.neighbors\nx_label = neighbors\n");
  run_experiment(c, out);
  const fs::path svg = emit_configured_report(c, out);
  const std::string first = test::slurp(svg);
  EXPECT_NE(first.find("<polyline"), std::string::npos);
  fs::remove(svg);
  emit_configured_report(c, out);
  EXPECT_EQ(test::slurp(svg), first);
  ExperimentConfig bad = c;
  bad.report.figure = "fig99";
  EXPECT_THROW(emit_configured_report(bad, out), ConfigError);
}
