#pragma once

// End-to-end runs: prune a container, and the desk-scale toy experiments
// (alpha sweep, calibration-size sweep, comparison groups). The command-line
// tool is a thin wrapper over these functions.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gblm/mask_builder.hpp"
#include "gblm/mask_viz.hpp"
#include "gblm/metric_engine.hpp"
#include "gblm/toy_lm.hpp"

namespace gblm {

/// Scores and masks every eligible layer. Layers are processed by `workers`
/// threads; the result does not depend on the worker count.
std::map<std::string, PruneMask> prune_layers(const Container& weights, const Container& stats,
                                              const MetricSpec& spec, const GroupSpec& group,
                                              const SparsitySpec& sparsity, const LayerSelection& sel = {},
                                              int workers = 1);

/// Mask container: one U8 record per layer plus group/sparsity metadata.
Container masks_to_container(const std::map<std::string, PruneMask>& masks);
std::map<std::string, PruneMask> masks_from_container(const Container& c);

struct RunConfig {
  std::filesystem::path tensors_path;
  std::filesystem::path stats_path;
  std::string metric = "gblm-l1";
  /// Custom metric as a JSON term list; overrides `metric` when set.
  std::optional<nlohmann::json> metric_json;
  double alpha = 100.0;
  GroupSpec group = GroupSpec::output_1();
  SparsitySpec sparsity = SparsitySpec::unstructured(0.5);
  LayerSelection selection;
  std::filesystem::path masks_out;
  std::optional<std::filesystem::path> report_out;
  std::uint64_t seed = 0;
  int workers = 1;

  MetricSpec metric_spec() const;
};

struct LayerReport {
  SparsityReport sparsity;
  std::optional<StructureReport> structure;
};

struct RunReport {
  MetricSpec metric;
  double alpha = 0.0;
  GroupSpec group;
  SparsitySpec sparsity;
  std::map<std::string, LayerReport> layers;
  std::map<std::string, double> seconds;
  std::optional<double> perplexity_before;
  std::optional<double> perplexity_after;

  /// Keys are sorted; only the "seconds" object varies between identical runs.
  nlohmann::json to_json() const;
};

/// Reads weights and statistics, writes masks (and the report if
/// requested). Toy-model containers also get perplexity before and after.
RunReport cmd_prune(const RunConfig& cfg);

// ---- Toy experiments -------------------------------------------------------

/// A trained toy model plus its evaluation corpus.
struct ToyContext {
  ToyConfig cfg;
  ToyModel model;
  Corpus eval;
};

ToyContext make_toy_context(const ToyConfig& cfg);

/// Masks for both toy layers from the given statistics.
LayerMasks toy_masks(const ToyContext& ctx, const std::map<std::string, LayerStats>& stats, const MetricSpec& spec,
                     const GroupSpec& group, const SparsitySpec& sparsity);
/// Masks from uniformly random scores drawn from the seed's mask stream.
LayerMasks toy_random_masks(const ToyContext& ctx, const GroupSpec& group, const SparsitySpec& sparsity,
                            std::uint64_t salt = 0);
double toy_perplexity(const ToyContext& ctx, const LayerMasks* masks = nullptr);

struct ToyRunSettings {
  std::string metric = "gblm-l1";
  double alpha = 100.0;
  GroupSpec group = GroupSpec::output_1();
  SparsitySpec sparsity = SparsitySpec::unstructured(0.5);
  int n_calib = 128;
};

struct AlphaRow {
  double alpha;
  double perplexity;
};
struct AlphaSweep {
  std::vector<AlphaRow> rows;
  double best_alpha = 0.0;
  double dense_perplexity = 0.0;
  nlohmann::json to_json() const;
};
AlphaSweep cmd_sweep_alpha(const ToyContext& ctx, const ToyRunSettings& s, const std::vector<double>& alphas);

struct CalibRow {
  int n_samples;
  double perplexity;      ///< first calibration set
  double mean = 0.0;      ///< over `repeats` disjoint calibration sets
  double stddev = 0.0;
  std::vector<double> repeats;
};
struct CalibSweep {
  std::vector<CalibRow> rows;
  double dense_perplexity = 0.0;
  nlohmann::json to_json() const;
};
/// `repeats` disjoint calibration sets are drawn per size (consecutive
/// sequence ranges of the calibration stream).
CalibSweep cmd_sweep_calib(const ToyContext& ctx, const ToyRunSettings& s, const std::vector<int>& sizes,
                           int repeats = 1);

struct GroupRow {
  GroupSpec group;
  double perplexity;
};
struct GroupComparison {
  std::vector<GroupRow> rows;
  GroupSpec winner;
  nlohmann::json to_json() const;
};
/// The five standard groups with the given block size.
std::vector<GroupSpec> standard_groups(Index block);
GroupComparison cmd_compare_groups(const ToyContext& ctx, const ToyRunSettings& s,
                                   const std::vector<GroupSpec>& groups);

}  // namespace gblm
