#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "gblm/mask_builder.hpp"

namespace gblm {

/// Binary P5 greymap, one pixel per weight: pruned = 0, kept = 255.
/// Height is d_out, width is d_in.
std::vector<std::uint8_t> encode_mask_pgm(const PruneMask& mask);
void render_mask_pgm(const PruneMask& mask, const std::filesystem::path& path);

/// Column-count dispersion of a mask with k pruned entries in every row.
///
/// Under the null where every row prunes a uniformly random k-subset of the
/// d_in columns, each column count is a sum of d_out independent indicators
/// with p = k / d_in, so its variance is d_out * p * (1 - p). The observed
/// statistic is the population variance of the column counts; their mean is
/// fixed at d_out * p, so the ratio has expectation 1 under the null and
/// exceeds 1 when rows agree on which columns to prune.
struct StructureReport {
  std::vector<std::int64_t> col_prune_counts;
  double chi_sq_columns = 0.0;
  double observed_variance = 0.0;
  double expected_variance = 0.0;
  double excess_variance_ratio = 0.0;
};

/// Throws InputError listing the offending rows when row cardinality is not
/// uniform.
StructureReport structure_report(const PruneMask& mask);
nlohmann::json to_json(const StructureReport& r);

}  // namespace gblm
