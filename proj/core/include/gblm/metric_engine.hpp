#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "gblm/calib_stats.hpp"
#include "gblm/common.hpp"
#include "gblm/tensor_store.hpp"

namespace gblm {

enum class WeightFactor { none, abs_w, signed_w };
enum class ActFactor { none, act_l2 };
/// `sum` is the signed gradient accumulation; acc/l1/l2 are the magnitudes
/// produced by LayerStats::grad_norm.
enum class GradFactor { none, acc, l1, l2, sum };

/// One additive term of a pruning metric:
///
///   coefficient * (weight_factor * act_factor)^power * grad_factor
///
/// where the activation factor broadcasts the column norm ||X[:,j]||_2.
struct MetricTerm {
  double coefficient = 1.0;
  WeightFactor weight = WeightFactor::abs_w;
  ActFactor act = ActFactor::none;
  GradFactor grad = GradFactor::none;
  int power = 1;

  /// Throws InputError if no factor is present, power is not 1 or 2, or
  /// power 2 is combined with a gradient factor.
  void validate() const;
  bool operator==(const MetricTerm&) const = default;
};

struct MetricSpec {
  std::string name;
  std::vector<MetricTerm> terms;

  void validate() const;
  bool uses_gradients() const;
  bool uses_activations() const;
  bool operator==(const MetricSpec&) const = default;
};

struct ImportanceMatrix {
  MatrixD scores;
  std::string metric_name;
};

/// Names accepted by builtin_metric, in a stable order.
const std::vector<std::string>& builtin_metric_names();

/// Builds a named metric. `alpha` scales the gradient term of the combined
/// metrics and is ignored by the single-term ones.
MetricSpec builtin_metric(std::string_view name, double alpha);

/// Evaluates the metric for one weight matrix. Scores are always double.
ImportanceMatrix score(const MetricSpec& spec, const MatrixD& w, const LayerStats& stats);

struct LayerSelection {
  /// Weight records whose name contains any of these substrings are skipped.
  std::vector<std::string> skip = {"embed", "lm_head"};
};

/// True for two-dimensional records named "*.weight" not excluded by `sel`.
bool is_prunable_weight(const TensorRecord& r, const LayerSelection& sel);

/// Scores every eligible weight record in `weights` using the matching
/// statistics in `stats`. Result is keyed by weight record name.
std::map<std::string, ImportanceMatrix> score_all_layers(const Container& weights, const Container& stats,
                                                         const MetricSpec& spec,
                                                         const LayerSelection& sel = {});

nlohmann::json to_json(const MetricSpec& spec);
/// Parses {"name": ..., "terms": [{"coefficient", "weight_factor",
/// "act_factor", "grad_factor", "power"}, ...]}.
MetricSpec metric_from_json(const nlohmann::json& j);

}  // namespace gblm
