#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <iterator>

#include "gblm/pipeline.hpp"
#include "test_support.hpp"

namespace gblm {
namespace {

std::vector<std::uint8_t> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

const ToyContext& shared_context() {
  static const ToyContext ctx = [] {
    ToyConfig cfg;
    cfg.seed = 21;
    cfg.sgd_steps = 500;
    return make_toy_context(cfg);
  }();
  return ctx;
}

// Writes the toy model and its calibration statistics; returns the paths.
std::pair<std::filesystem::path, std::filesystem::path> export_toy(const testing::TempDir& dir, int n_calib = 16) {
  const auto& ctx = shared_context();
  const auto model_path = dir / "model.safetensors";
  const auto stats_path = dir / "stats.safetensors";
  write_container(to_container(ctx.model, ctx.cfg), model_path);
  Container stats;
  for (const auto& [name, s] : calibrate(ctx.model, ctx.cfg, {n_calib, 0})) write_stats(stats, name, s);
  write_sample_count(stats, static_cast<std::uint64_t>(n_calib));
  write_container(stats, stats_path);
  return {model_path, stats_path};
}

TEST(Pipeline, PruneLayersIsIndependentOfWorkerCount) {
  Container weights, stats;
  for (int l = 0; l < 7; ++l) {
    const std::string name = "layers." + std::to_string(l) + ".proj.weight";
    weights.add(TensorRecord::from_matrix(name, testing::random_matrix(l, 12, 24)));
    LayerStats s(12, 24);
    for (int k = 0; k < 4; ++k) s.accumulate_gradient(testing::random_matrix(100 * l + k, 12, 24));
    s.accumulate_activations(testing::random_matrix(1000 + l, 30, 24));
    write_stats(stats, name, s);
  }
  write_sample_count(stats, 4);
  const auto spec = builtin_metric("gblm-l1", 100);
  const auto one = prune_layers(weights, stats, spec, GroupSpec::output_1(), SparsitySpec::unstructured(0.5), {}, 1);
  const auto four = prune_layers(weights, stats, spec, GroupSpec::output_1(), SparsitySpec::unstructured(0.5), {}, 4);
  ASSERT_EQ(one.size(), 7u);
  for (const auto& [name, m] : one) EXPECT_EQ(four.at(name).mask, m.mask) << name;
  EXPECT_EQ(encode_container(masks_to_container(one)), encode_container(masks_to_container(four)));
}

TEST(Pipeline, PruneLayersNamesFailingLayer) {
  Container weights, stats;
  weights.add(TensorRecord::from_matrix("layers.0.a.weight", testing::random_matrix(1, 4, 4)));
  LayerStats wrong(4, 5);
  wrong.accumulate_gradient(MatrixD::Ones(4, 5));
  wrong.accumulate_activations(MatrixD::Ones(2, 5));
  write_stats(stats, "layers.0.a.weight", wrong);
  write_sample_count(stats, 1);
  try {
    prune_layers(weights, stats, builtin_metric("gblm-l1", 1), GroupSpec::output_1(), SparsitySpec::unstructured(0.5));
    FAIL() << "dimension mismatch accepted";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("layers.0.a.weight"), std::string::npos);
  }
}

TEST(Pipeline, MaskContainerRoundTrip) {
  std::map<std::string, PruneMask> masks;
  masks.emplace("layers.0.a.weight", build_mask(testing::random_matrix(3, 4, 8), GroupSpec::input_block(2),
                                                SparsitySpec::unstructured(0.25)));
  masks.emplace("layers.1.b.weight",
                build_mask(testing::random_matrix(4, 4, 8), GroupSpec::output_1(), SparsitySpec::n_of_m(2, 4)));
  const auto c = decode_container(encode_container(masks_to_container(masks)));
  EXPECT_EQ(c.at("layers.0.a.weight.mask").dtype, DType::U8);
  const auto back = masks_from_container(c);
  ASSERT_EQ(back.size(), 2u);
  for (const auto& [name, m] : masks) {
    EXPECT_EQ(back.at(name).mask, m.mask);
    EXPECT_EQ(back.at(name).group, m.group);
    EXPECT_EQ(back.at(name).sparsity, m.sparsity);
  }
}

TEST(Pipeline, PruneToyExportHalvesEveryRow) {
  testing::TempDir dir;
  const auto [model, stats] = export_toy(dir);
  RunConfig cfg;
  cfg.tensors_path = model;
  cfg.stats_path = stats;
  cfg.masks_out = dir / "masks.safetensors";
  cfg.report_out = dir / "report.json";
  const auto report = cmd_prune(cfg);
  ASSERT_EQ(report.layers.size(), 2u);
  for (const auto& [name, lr] : report.layers) {
    const auto cols = static_cast<std::int64_t>(lr.sparsity.pruned_per_col.size());
    for (auto c : lr.sparsity.pruned_per_row) EXPECT_EQ(c, cols / 2) << name;
    ASSERT_TRUE(lr.structure);
  }
  ASSERT_TRUE(report.perplexity_before && report.perplexity_after);
  EXPECT_NEAR(*report.perplexity_before, toy_perplexity(shared_context()), 1e-12);
  EXPECT_GT(*report.perplexity_after, *report.perplexity_before);

  const auto masks = masks_from_container(read_container(cfg.masks_out));
  EXPECT_EQ(masks.size(), 2u);
  std::ifstream in(*cfg.report_out);
  const auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j.at("metric").at("name"), "gblm-l1");
  EXPECT_EQ(j.at("metric").at("terms").size(), 2u);
  EXPECT_EQ(j.at("group"), "output,1");
  EXPECT_EQ(j.at("alpha"), 100.0);
}

TEST(Pipeline, PruneIsReproducible) {
  testing::TempDir dir;
  const auto [model, stats] = export_toy(dir);
  RunConfig cfg;
  cfg.tensors_path = model;
  cfg.stats_path = stats;
  cfg.masks_out = dir / "a.safetensors";
  auto first = cmd_prune(cfg).to_json();
  cfg.masks_out = dir / "b.safetensors";
  cfg.workers = 3;
  auto second = cmd_prune(cfg).to_json();
  EXPECT_EQ(slurp(dir / "a.safetensors"), slurp(dir / "b.safetensors"));
  first.erase("seconds");
  second.erase("seconds");
  EXPECT_EQ(first.dump(), second.dump());
}

TEST(Pipeline, NMPruneReportsConformance) {
  testing::TempDir dir;
  const auto [model, stats] = export_toy(dir);
  RunConfig cfg;
  cfg.tensors_path = model;
  cfg.stats_path = stats;
  cfg.sparsity = SparsitySpec::n_of_m(2, 4);
  cfg.masks_out = dir / "nm.safetensors";
  const auto report = cmd_prune(cfg);
  for (const auto& [name, lr] : report.layers) {
    ASSERT_TRUE(lr.sparsity.nm_conformant);
    EXPECT_TRUE(*lr.sparsity.nm_conformant);
    EXPECT_FALSE(lr.structure);
  }
  EXPECT_EQ(report.to_json().at("layers").at(std::string(kFc1Name)).at("nm_conformant"), true);
}

TEST(Pipeline, MissingStatsFileIsInputError) {
  testing::TempDir dir;
  const auto [model, stats] = export_toy(dir);
  RunConfig cfg;
  cfg.tensors_path = model;
  cfg.stats_path = dir / "missing.safetensors";
  cfg.masks_out = dir / "m.safetensors";
  EXPECT_THROW(cmd_prune(cfg), InputError);
  EXPECT_FALSE(std::filesystem::exists(cfg.masks_out));
}

TEST(Pipeline, CustomMetricJsonOverridesName) {
  RunConfig cfg;
  cfg.metric = "magnitude";
  EXPECT_EQ(cfg.metric_spec().name, "magnitude");
  cfg.metric_json = to_json(builtin_metric("gblm-sq-l2", 5));
  EXPECT_EQ(cfg.metric_spec(), builtin_metric("gblm-sq-l2", 5));
}

TEST(ToyExperiments, AlphaSweep) {
  const auto& ctx = shared_context();
  ToyRunSettings s;
  s.n_calib = 16;
  const std::vector<double> grid = {1e-3, 1e-2, 1e-1, 1, 10, 100, 1e3, 1e4, 1e5};
  const auto sweep = cmd_sweep_alpha(ctx, s, grid);
  ASSERT_EQ(sweep.rows.size(), 9u);
  double best = 1e300;
  for (const auto& r : sweep.rows) best = std::min(best, r.perplexity);
  const auto first_best = std::find_if(sweep.rows.begin(), sweep.rows.end(), [&](const AlphaRow& r) { return r.perplexity == best; });
  EXPECT_EQ(sweep.best_alpha, first_best->alpha);
  EXPECT_EQ(cmd_sweep_alpha(ctx, s, {100}).rows.size(), 1u);

  const auto zero = cmd_sweep_alpha(ctx, s, {0.0});
  const auto stats = calibrate(ctx.model, ctx.cfg, {16, 0});
  const auto wanda = toy_masks(ctx, stats, builtin_metric("wanda", 0), s.group, s.sparsity);
  EXPECT_EQ(zero.rows[0].perplexity, toy_perplexity(ctx, &wanda));
  EXPECT_THROW(cmd_sweep_alpha(ctx, s, {}), InputError);
  EXPECT_EQ(cmd_sweep_alpha(ctx, s, grid).to_json(), sweep.to_json());
}

TEST(ToyExperiments, CalibrationSweep) {
  const auto& ctx = shared_context();
  ToyRunSettings s;
  const auto sweep = cmd_sweep_calib(ctx, s, {2, 2, 4}, 1);
  ASSERT_EQ(sweep.rows.size(), 3u);
  EXPECT_EQ(sweep.rows[0].perplexity, sweep.rows[1].perplexity);
  const auto repeated = cmd_sweep_calib(ctx, s, {4}, 5);
  ASSERT_EQ(repeated.rows[0].repeats.size(), 5u);
  EXPECT_GT(repeated.rows[0].stddev, 0.0);
  EXPECT_EQ(repeated.rows[0].perplexity, sweep.rows[2].perplexity);
  EXPECT_THROW(cmd_sweep_calib(ctx, s, {}, 1), InputError);
  EXPECT_THROW(cmd_sweep_calib(ctx, s, {0}, 1), InputError);
}

TEST(ToyExperiments, CompareGroups) {
  const auto& ctx = shared_context();
  ToyRunSettings s;
  s.n_calib = 16;
  const auto cmp = cmd_compare_groups(ctx, s, standard_groups(16));
  ASSERT_EQ(cmp.rows.size(), 5u);
  double best = 1e300;
  for (const auto& r : cmp.rows) best = std::min(best, r.perplexity);
  const auto first_best = std::find_if(cmp.rows.begin(), cmp.rows.end(), [&](const GroupRow& r) { return r.perplexity == best; });
  EXPECT_EQ(cmp.winner, first_best->group);
  try {
    cmd_compare_groups(ctx, s, standard_groups(128));
    FAIL() << "oversized block accepted";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("128"), std::string::npos);
  }
}

TEST(ToyExperiments, RandomMasksAreSeededAndSalted) {
  const auto& ctx = shared_context();
  const auto a = toy_random_masks(ctx, GroupSpec::output_1(), SparsitySpec::unstructured(0.5));
  const auto b = toy_random_masks(ctx, GroupSpec::output_1(), SparsitySpec::unstructured(0.5));
  const auto c = toy_random_masks(ctx, GroupSpec::output_1(), SparsitySpec::unstructured(0.5), 1);
  EXPECT_EQ(a.at(std::string(kFc1Name)).mask, b.at(std::string(kFc1Name)).mask);
  EXPECT_NE(a.at(std::string(kFc1Name)).mask, c.at(std::string(kFc1Name)).mask);
}

}  // namespace
}  // namespace gblm
