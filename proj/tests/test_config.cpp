#include <gtest/gtest.h>

#include "glstm/config.hpp"

using namespace glstm;

namespace {

std::pair<std::size_t, std::size_t> error_position(const std::string& text) {
  try {
    parse_config_text(text);
  } catch (const ConfigError& e) {
    return {e.line(), e.column()};
  }
  return {0, 0};
}

}  // namespace

TEST(Config, MinimalConfigFillsDefaults) {
  const ExperimentConfig c = parse_config_text("[task]\nname = nar\n[model]\narch = glstm\n");
  EXPECT_EQ(c.task.kind, TaskKind::kNar);
  ASSERT_EQ(c.models.size(), 1u);
  EXPECT_EQ(c.models[0].name, "default");
  EXPECT_EQ(c.models[0].config, ModelConfig{});
  EXPECT_EQ(c.sizes.train, 10000u);
  EXPECT_EQ(c.train.lr, 1e-3);
  EXPECT_EQ(c.train.patience, 20u);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{0}));
  EXPECT_EQ(c.probe.kind, ProbeKind::kNone);
}

TEST(Config, SweepTimesSeedsIsCartesian) {
  const ExperimentConfig c = parse_config_text(
      "[task]\nname = nar\n[model]\narch = glstm\n[sweep]\ntask.neighbors = 2, 4\n[experiment]\nseeds = 0, 1\n");
  const auto runs = expand_runs(c);
  ASSERT_EQ(runs.size(), 4u);
  EXPECT_EQ(runs[0].task.neighbors, 2u);
  EXPECT_EQ(runs[0].seed, 0u);
  EXPECT_EQ(runs[1].seed, 1u);
  EXPECT_EQ(runs[2].task.neighbors, 4u);
  EXPECT_EQ(runs[3].point.at("task.neighbors"), "4");
  EXPECT_EQ(runs[3].model.output_dim, 4u);
  EXPECT_EQ(runs[3].train.seed, 1u);
  // seeds share the configuration hash
  EXPECT_EQ(run_config_hash(runs[0]), run_config_hash(runs[1]));
  EXPECT_NE(run_config_hash(runs[0]), run_config_hash(runs[2]));
}

TEST(Config, MultipleAxesAndModels) {
  const ExperimentConfig c = parse_config_text(
      "[task]\nname = nar\n[model:g]\narch = glstm\n[model:c]\narch = gcn\nk_hop = false\n"
      "[sweep]\ntask.neighbors = 2, 4, 8\nmodel.memory = 4, 8\n");
  const auto runs = expand_runs(c);
  ASSERT_EQ(runs.size(), 3u * 2u * 2u);
  EXPECT_EQ(runs[0].model_name, "g");
  EXPECT_EQ(runs[1].model_name, "c");
  EXPECT_EQ(runs[1].model.arch, Architecture::kGcn);
  EXPECT_EQ(runs[2].model.memory, 8u);
  EXPECT_EQ(runs[4].task.neighbors, 4u);
}

TEST(Config, AutoLayersUsesRequiredDepth) {
  const ExperimentConfig c = parse_config_text(
      "[task]\nname = ring_transfer\n[model]\nlayers = auto\n[sweep]\ntask.ring_size = 4, 9, 20\n");
  const auto runs = expand_runs(c);
  ASSERT_EQ(runs.size(), 3u);
  EXPECT_EQ(runs[0].model.layers, 2u);
  EXPECT_EQ(runs[1].model.layers, 4u);
  EXPECT_EQ(runs[2].model.layers, 10u);
  const ExperimentConfig bad = parse_config_text("[task]\nname = diameter\n[model]\nlayers = auto\n");
  EXPECT_THROW(expand_runs(bad), ConfigError);
}

TEST(Config, EmitParseRoundTrip) {
  const std::string text =
      "# capacity sweep\n[task]\nname = nar\ntrain_size = 500 # small\nseed = 3\nfamilies = er, ba, grid\n"
      "[model:g]\narch = glstm\nmemory = 8\nlayers = auto\nactivation = gelu\n[model:c]\narch = gcn\nhidden = 64\n"
      "k_hop = false\n[train]\nlr = 3e-3\nstop_at = 1\nweight_decay = 0.0625\n"
      "[sweep]\ntask.neighbors = 2, 4, 8\ntrain.batch_size = 32, 64\n"
      "[experiment]\nseeds = 0, 1, 2\nout = somewhere\nworkers = 3\n"
      "[probe]\nkind = mixing\ninstances = 50\n[report]\nfigure = fig7\nlog_y = true\nx_label = N\n";
  const ExperimentConfig a = parse_config_text(text);
  const std::string emitted = emit_config(a);
  const ExperimentConfig b = parse_config_text(emitted);
  EXPECT_EQ(emit_config(b), emitted);
  EXPECT_TRUE(same_config(a, b));
  EXPECT_EQ(b.models[0].auto_layers, true);
  EXPECT_EQ(b.models[1].config.hidden, 64u);
  EXPECT_EQ(b.train.lr, 3e-3);
  EXPECT_EQ(b.task.gpp.families.size(), 3u);
  EXPECT_EQ(b.probe.kind, ProbeKind::kMixing);
  EXPECT_EQ(b.report.figure, "fig7");
  EXPECT_EQ(b.seeds.size(), 3u);
  const auto ra = expand_runs(a), rb = expand_runs(b);
  ASSERT_EQ(ra.size(), rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) EXPECT_EQ(run_text(ra[i]), run_text(rb[i]));
}

TEST(Config, ErrorsCarryLineAndColumn) {
  EXPECT_EQ(error_position("[task]\nname = nar\nbogus = 1\n"), std::make_pair(std::size_t{3}, std::size_t{1}));
  EXPECT_EQ(error_position("[task]\n  neighbors = -3\n"), std::make_pair(std::size_t{2}, std::size_t{15}));
  EXPECT_EQ(error_position("[nonsense]\n").first, 1u);
  EXPECT_EQ(error_position("name = nar\n").first, 1u);
  EXPECT_EQ(error_position("[task]\nname\n").first, 2u);
  EXPECT_EQ(error_position("[task]\nname = nar\nname = narr\n").first, 3u);
  EXPECT_EQ(error_position("[model]\narch = transformer\n").first, 2u);
  EXPECT_EQ(error_position("[train]\nlr = 0\n").first, 2u);
  EXPECT_EQ(error_position("[model]\nheads = 3\nhidden = 2, 3\n").first, 3u);
  EXPECT_EQ(error_position("[task\n").first, 1u);
  EXPECT_EQ(error_position("[probe]\nkind = everything\n").first, 2u);
}

TEST(Config, SemanticValidation) {
  EXPECT_THROW(parse_config_text("[sweep]\nneighbors = 2, 4\n"), ConfigError);
  EXPECT_THROW(parse_config_text("[sweep]\ntask.neighbors = 2, x\n"), ConfigError);
  EXPECT_THROW(parse_config_text("[sweep]\nmodel.nothing = 1\n"), ConfigError);
  EXPECT_THROW(parse_config_text("[train]\npatience = 0\n"), ConfigError);
  EXPECT_THROW(parse_config_text("[model]\nheads = 0\n"), ConfigError);
  EXPECT_THROW(parse_config_text("[model:a]\n[model:a]\n"), ConfigError);
  EXPECT_THROW(parse_config_text("[experiment]\nworkers = 0\n"), ConfigError);
  EXPECT_THROW(parse_config("/nonexistent/config.cfg"), ConfigError);
}

TEST(Config, SeedOverrideReplacesAllSeeds) {
  ExperimentConfig c = parse_config_text("[task]\nseed = 4\n[experiment]\nseeds = 1, 2, 3\n");
  override_seeds(c, 11);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{11}));
  EXPECT_EQ(c.task_seed, 11u);
}

TEST(Config, HashIsFnv1a) {
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a("foobar"), 0x85944171f73967e8ULL);
  EXPECT_EQ(hex64(0xabcULL), "0000000000000abc");
  const ExperimentConfig c = parse_config_text("[task]\nname = nar\n");
  const auto r = expand_runs(c);
  EXPECT_EQ(run_config_hash(r[0]).size(), 16u);
}
