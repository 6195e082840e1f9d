#include "gblm/mask_builder.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

namespace gblm {

namespace {

// Selects the k lowest-scoring flat indices of one group. Ties prune the
// larger flat index first, which makes the result independent of the order
// `idx` was filled in.
void prune_lowest(const double* scores, std::vector<Index>& idx, Index k, bool* mask) {
  if (k <= 0) return;
  auto lower = [scores](Index a, Index b) {
    return scores[a] < scores[b] || (scores[a] == scores[b] && a > b);
  };
  if (k < static_cast<Index>(idx.size())) {
    std::nth_element(idx.begin(), idx.begin() + k, idx.end(), lower);
  }
  for (Index t = 0; t < k; ++t) mask[idx[static_cast<std::size_t>(t)]] = true;
}

Index pruned_count(double ratio, Index group_size) {
  // The small slack keeps decimal ratios like 0.29 * 100 from rounding down
  // to 28.
  const auto k = static_cast<Index>(std::floor(ratio * static_cast<double>(group_size) + 1e-9));
  return std::clamp<Index>(k, 0, group_size);
}

Index parse_index(std::string_view s, std::string_view what) {
  Index v = 0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) throw InputError("invalid " + std::string(what) + " '" + std::string(s) + "'");
  return v;
}

}  // namespace

std::string GroupSpec::label() const {
  switch (kind) {
    case GroupKind::layer: return "layer";
    case GroupKind::output_1: return "output,1";
    case GroupKind::input_1: return "input,1";
    case GroupKind::output_block: return "output," + std::to_string(block);
    case GroupKind::input_block: return "input," + std::to_string(block);
  }
  return "?";
}

GroupSpec GroupSpec::parse(std::string_view text) {
  if (text == "layer") return layer();
  const auto sep = text.find_first_of(",_");
  if (sep == std::string_view::npos) throw InputError("unknown comparison group '" + std::string(text) + "'");
  const auto axis = text.substr(0, sep);
  const auto b = parse_index(text.substr(sep + 1), "group block size");
  if (b < 1) throw InputError("group block size must be positive");
  if (axis == "output") return b == 1 ? output_1() : output_block(b);
  if (axis == "input") return b == 1 ? input_1() : input_block(b);
  throw InputError("unknown comparison group '" + std::string(text) + "'");
}

std::string SparsitySpec::label() const {
  if (nm) return std::to_string(nm->n) + ":" + std::to_string(nm->m);
  std::ostringstream os;
  os << ratio.value_or(0.0);
  return os.str();
}

SparsitySpec SparsitySpec::parse(std::string_view text) {
  if (const auto colon = text.find(':'); colon != std::string_view::npos) {
    return n_of_m(parse_index(text.substr(0, colon), "N:M value"), parse_index(text.substr(colon + 1), "N:M value"));
  }
  double r = 0.0;
  const auto* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, r);
  if (ec != std::errc() || p != end) throw InputError("invalid sparsity '" + std::string(text) + "'");
  return unstructured(r);
}

PruneMask build_mask(const ImportanceMatrix& scores, const GroupSpec& group, const SparsitySpec& sp) {
  return build_mask(scores.scores, group, sp);
}

PruneMask build_mask(const MatrixD& scores, const GroupSpec& group, const SparsitySpec& sp) {
  const Index rows = scores.rows();
  const Index cols = scores.cols();
  for (Index k = 0; k < scores.size(); ++k) {
    if (std::isnan(scores.data()[k])) {
      throw NumericError("NaN score at (" + std::to_string(k / std::max<Index>(cols, 1)) + "," +
                         std::to_string(k % std::max<Index>(cols, 1)) + ")");
    }
  }

  PruneMask out{MaskMatrix::Constant(rows, cols, false), group, sp};
  const double* s = scores.data();
  bool* m = out.mask.data();
  std::vector<Index> idx;

  if (sp.nm) {
    const auto [n, blk] = *sp.nm;
    if (n < 1 || blk < 1 || n > blk) throw InputError("N:M pattern needs 1 <= n <= m");
    if (group.kind != GroupKind::output_1) {
      throw InputError("N:M sparsity tiles each output row; comparison group must be output,1");
    }
    if (cols % blk != 0) {
      throw InputError("m = " + std::to_string(blk) + " does not divide d_in = " + std::to_string(cols));
    }
    for (Index i = 0; i < rows; ++i) {
      for (Index j0 = 0; j0 < cols; j0 += blk) {
        idx.clear();
        for (Index j = j0; j < j0 + blk; ++j) idx.push_back(i * cols + j);
        prune_lowest(s, idx, blk - n, m);
      }
    }
    return out;
  }

  const double ratio = sp.ratio.value_or(-1.0);
  if (!std::isfinite(ratio) || ratio < 0.0 || ratio > 1.0) {
    throw InputError("sparsity ratio must lie in [0,1], got " + sp.label());
  }

  auto rows_range = [&](Index r0, Index r1) {
    idx.clear();
    for (Index i = r0; i < r1; ++i) {
      for (Index j = 0; j < cols; ++j) idx.push_back(i * cols + j);
    }
    prune_lowest(s, idx, pruned_count(ratio, static_cast<Index>(idx.size())), m);
  };
  auto cols_range = [&](Index c0, Index c1) {
    idx.clear();
    for (Index i = 0; i < rows; ++i) {
      for (Index j = c0; j < c1; ++j) idx.push_back(i * cols + j);
    }
    prune_lowest(s, idx, pruned_count(ratio, static_cast<Index>(idx.size())), m);
  };
  auto check_block = [&](Index dim, const char* axis) {
    if (group.block < 1 || group.block > dim) {
      throw InputError("comparison group " + group.label() + ": block " + std::to_string(group.block) +
                       " exceeds " + axis + " = " + std::to_string(dim));
    }
  };

  switch (group.kind) {
    case GroupKind::layer:
      rows_range(0, rows);
      break;
    case GroupKind::output_1:
      for (Index i = 0; i < rows; ++i) rows_range(i, i + 1);
      break;
    case GroupKind::input_1:
      for (Index j = 0; j < cols; ++j) cols_range(j, j + 1);
      break;
    case GroupKind::output_block:
      check_block(rows, "d_out");
      for (Index i = 0; i < rows; i += group.block) rows_range(i, std::min(rows, i + group.block));
      break;
    case GroupKind::input_block:
      check_block(cols, "d_in");
      for (Index j = 0; j < cols; j += group.block) cols_range(j, std::min(cols, j + group.block));
      break;
  }
  return out;
}

MatrixD apply_mask(const MatrixD& w, const PruneMask& mask) {
  if (w.rows() != mask.mask.rows() || w.cols() != mask.mask.cols()) {
    throw ShapeError("mask shape (" + std::to_string(mask.mask.rows()) + "," + std::to_string(mask.mask.cols()) +
                     ") does not match weight (" + std::to_string(w.rows()) + "," + std::to_string(w.cols()) + ")");
  }
  MatrixD out = w;
  for (Index k = 0; k < out.size(); ++k) {
    if (mask.mask.data()[k]) out.data()[k] = 0.0;
  }
  return out;
}

SparsityReport mask_stats(const PruneMask& mask) {
  const auto& mm = mask.mask;
  SparsityReport r;
  r.pruned_per_row.assign(static_cast<std::size_t>(mm.rows()), 0);
  r.pruned_per_col.assign(static_cast<std::size_t>(mm.cols()), 0);
  std::int64_t total = 0;
  for (Index i = 0; i < mm.rows(); ++i) {
    for (Index j = 0; j < mm.cols(); ++j) {
      if (!mm(i, j)) continue;
      ++r.pruned_per_row[static_cast<std::size_t>(i)];
      ++r.pruned_per_col[static_cast<std::size_t>(j)];
      ++total;
    }
  }
  r.global_sparsity = mm.size() == 0 ? 0.0 : static_cast<double>(total) / static_cast<double>(mm.size());
  if (mask.sparsity.nm) {
    const auto [n, blk] = *mask.sparsity.nm;
    bool ok = blk >= 1 && mm.cols() % blk == 0;
    for (Index i = 0; ok && i < mm.rows(); ++i) {
      for (Index j0 = 0; ok && j0 < mm.cols(); j0 += blk) {
        ok = mm.row(i).segment(j0, blk).count() == blk - n;
      }
    }
    r.nm_conformant = ok;
  }
  return r;
}

nlohmann::json to_json(const SparsityReport& report, bool include_counts) {
  nlohmann::json j{{"global_sparsity", report.global_sparsity}};
  if (include_counts) {
    j["pruned_per_row"] = report.pruned_per_row;
    j["pruned_per_col"] = report.pruned_per_col;
  }
  j["nm_conformant"] = report.nm_conformant ? nlohmann::json(*report.nm_conformant) : nlohmann::json(nullptr);
  return j;
}

}  // namespace gblm
