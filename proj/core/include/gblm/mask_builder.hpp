#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "gblm/common.hpp"
#include "gblm/metric_engine.hpp"

namespace gblm {

/// Which weights are ranked against each other.
enum class GroupKind {
  layer,         ///< the whole matrix
  output_1,      ///< one output row
  input_1,       ///< one input column
  output_block,  ///< `block` consecutive output rows
  input_block,   ///< `block` consecutive input columns
};

struct GroupSpec {
  GroupKind kind = GroupKind::output_1;
  Index block = 128;

  static GroupSpec layer() { return {GroupKind::layer, 1}; }
  static GroupSpec output_1() { return {GroupKind::output_1, 1}; }
  static GroupSpec input_1() { return {GroupKind::input_1, 1}; }
  static GroupSpec output_block(Index b) { return {GroupKind::output_block, b}; }
  static GroupSpec input_block(Index b) { return {GroupKind::input_block, b}; }

  /// "layer", "output,1", "input,1", "output,128", "input,128".
  std::string label() const;
  static GroupSpec parse(std::string_view text);
  bool operator==(const GroupSpec&) const = default;
};

struct NMPattern {
  Index n = 2;
  Index m = 4;
  bool operator==(const NMPattern&) const = default;
};

/// Either an unstructured ratio in [0,1] or an N:M pattern (keep at most n
/// of every m consecutive weights along the input dimension).
struct SparsitySpec {
  std::optional<double> ratio = 0.5;
  std::optional<NMPattern> nm;

  static SparsitySpec unstructured(double r) { return {r, std::nullopt}; }
  static SparsitySpec n_of_m(Index n, Index m) { return {std::nullopt, NMPattern{n, m}}; }

  bool is_nm() const noexcept { return nm.has_value(); }
  /// "0.5" or "2:4".
  std::string label() const;
  static SparsitySpec parse(std::string_view text);
  bool operator==(const SparsitySpec&) const = default;
};

struct PruneMask {
  MaskMatrix mask;  ///< true = pruned
  GroupSpec group;
  SparsitySpec sparsity;
};

/// Prunes the floor(ratio * s) lowest scores in every comparison group of
/// size s, or the m - n lowest in every N:M block. Equal scores are broken
/// by pruning the larger row-major flat index first.
PruneMask build_mask(const ImportanceMatrix& scores, const GroupSpec& group, const SparsitySpec& sp);
PruneMask build_mask(const MatrixD& scores, const GroupSpec& group, const SparsitySpec& sp);

/// Copy of `w` with pruned entries set to exactly zero.
MatrixD apply_mask(const MatrixD& w, const PruneMask& mask);

struct SparsityReport {
  double global_sparsity = 0.0;
  std::vector<std::int64_t> pruned_per_row;
  std::vector<std::int64_t> pruned_per_col;
  /// Set for N:M masks: every block holds exactly m - n pruned entries.
  std::optional<bool> nm_conformant;
};

SparsityReport mask_stats(const PruneMask& mask);
nlohmann::json to_json(const SparsityReport& report, bool include_counts = true);

/// Mask records are stored as U8 tensors named weight + ".mask".
inline std::string mask_record_name(const std::string& weight_name) { return weight_name + ".mask"; }

}  // namespace gblm
