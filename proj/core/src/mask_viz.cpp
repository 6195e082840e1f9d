#include "gblm/mask_viz.hpp"

#include <fstream>
#include <string>

namespace gblm {

std::vector<std::uint8_t> encode_mask_pgm(const PruneMask& mask) {
  const auto& m = mask.mask;
  const std::string header = "P5\n" + std::to_string(m.cols()) + " " + std::to_string(m.rows()) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + static_cast<std::size_t>(m.size()));
  for (Index k = 0; k < m.size(); ++k) out.push_back(m.data()[k] ? 0x00 : 0xFF);
  return out;
}

void render_mask_pgm(const PruneMask& mask, const std::filesystem::path& path) {
  const auto bytes = encode_mask_pgm(mask);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write to '" + path.string() + "' failed");
}

StructureReport structure_report(const PruneMask& mask) {
  const auto& m = mask.mask;
  const Index rows = m.rows();
  const Index cols = m.cols();
  if (rows == 0 || cols == 0) throw ShapeError("structure report needs a nonempty mask");

  const Index k = m.row(0).count();
  std::string bad;
  for (Index i = 0; i < rows; ++i) {
    if (m.row(i).count() != k) {
      if (!bad.empty()) bad += ",";
      bad += std::to_string(i);
    }
  }
  if (!bad.empty()) {
    throw InputError("structure report needs equal pruned counts per row; rows differing from row 0 (" +
                     std::to_string(k) + " pruned): " + bad);
  }

  StructureReport r;
  r.col_prune_counts.resize(static_cast<std::size_t>(cols));
  for (Index j = 0; j < cols; ++j) r.col_prune_counts[static_cast<std::size_t>(j)] = m.col(j).count();

  const double p = static_cast<double>(k) / static_cast<double>(cols);
  const double mean = static_cast<double>(rows) * p;
  double ss = 0.0;
  for (auto c : r.col_prune_counts) ss += (static_cast<double>(c) - mean) * (static_cast<double>(c) - mean);
  r.observed_variance = ss / static_cast<double>(cols);
  r.expected_variance = static_cast<double>(rows) * p * (1.0 - p);
  r.chi_sq_columns = mean > 0.0 ? ss / mean : 0.0;
  r.excess_variance_ratio = r.expected_variance > 0.0 ? r.observed_variance / r.expected_variance : 0.0;
  return r;
}

nlohmann::json to_json(const StructureReport& r) {
  return {{"col_prune_counts", r.col_prune_counts},
          {"chi_sq_columns", r.chi_sq_columns},
          {"observed_variance", r.observed_variance},
          {"expected_variance", r.expected_variance},
          {"excess_variance_ratio", r.excess_variance_ratio}};
}

}  // namespace gblm
