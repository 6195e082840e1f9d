#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <type_traits>

#include "gblm/common.hpp"
#include "gblm/tensor_store.hpp"

namespace gblm {

/// How per-sample gradients collapse into one magnitude per weight.
enum class GradNorm {
  acc,  ///< |sum of gradients|
  l1,   ///< sum of |gradient|
  l2,   ///< sqrt(sum of gradient^2)
};

std::string_view grad_norm_name(GradNorm p) noexcept;
GradNorm parse_grad_norm(std::string_view name);

/// Streaming sufficient statistics for one linear layer of shape (d_out, d_in).
///
/// Gradients arrive one calibration sample at a time; activations arrive as
/// batches of input rows. Everything is accumulated in double precision and
/// nothing is averaged: the norms are raw sums over samples.
class LayerStats {
 public:
  LayerStats(Index d_out, Index d_in);

  /// Adds one per-sample gradient. The whole sample is rejected (no
  /// accumulator changes) if any entry is non-finite.
  void accumulate_gradient(const MatrixD& g_sample);
  void accumulate_gradient(const MatrixF& g_sample);
  /// Unevaluated expressions go through the overload matching their scalar.
  template <class Derived>
    requires(!std::is_same_v<Derived, MatrixD> && !std::is_same_v<Derived, MatrixF>)
  void accumulate_gradient(const Eigen::MatrixBase<Derived>& g_sample) {
    if constexpr (std::is_same_v<typename Derived::Scalar, float>) {
      accumulate_gradient(MatrixF(g_sample));
    } else {
      accumulate_gradient(MatrixD(g_sample.template cast<double>()));
    }
  }

  /// Adds a batch of layer input rows, shape (rows, d_in).
  void accumulate_activations(const MatrixD& x_rows);

  /// Field-wise sum with statistics gathered over a disjoint sample set.
  void merge(const LayerStats& other);

  MatrixD grad_norm(GradNorm p) const;
  VectorD act_norm() const;

  Index d_out() const noexcept { return grad_abs_sum_.rows(); }
  Index d_in() const noexcept { return grad_abs_sum_.cols(); }
  std::uint64_t n_samples() const noexcept { return n_samples_; }
  std::uint64_t n_act_rows() const noexcept { return n_act_rows_; }

  const MatrixD& grad_abs_sum() const noexcept { return grad_abs_sum_; }
  const MatrixD& grad_sq_sum() const noexcept { return grad_sq_sum_; }
  const MatrixD& grad_sum() const noexcept { return grad_sum_; }
  const VectorD& act_sq_sum() const noexcept { return act_sq_sum_; }

  /// Rebuilds statistics from stored accumulators, validating the
  /// invariants (nonnegative squares, |grad_sum| <= grad_abs_sum).
  static LayerStats from_sums(MatrixD grad_abs_sum, MatrixD grad_sq_sum, MatrixD grad_sum,
                              VectorD act_sq_sum, std::uint64_t n_samples, std::uint64_t n_act_rows);

  /// Entry count d_out*d_in with overflow checking.
  static std::uint64_t element_count(Index d_out, Index d_in);

 private:
  MatrixD grad_abs_sum_;
  MatrixD grad_sq_sum_;
  MatrixD grad_sum_;
  VectorD act_sq_sum_;
  std::uint64_t n_samples_ = 0;
  std::uint64_t n_act_rows_ = 0;
};

// Container naming convention for statistics of weight record `w`:
//   w + ".grad_abs_sum", ".grad_sq_sum", ".grad_sum", ".act_sq_sum"
// plus the global sample count "calib.n_samples" (F64, shape [1]).
// An optional w + ".act_rows" (F64, shape [1]) records the activation row
// count; when absent the sample count stands in for it.
inline constexpr std::string_view kSamplesRecord = "calib.n_samples";

void write_stats(Container& c, const std::string& weight_name, const LayerStats& stats);
void write_sample_count(Container& c, std::uint64_t n_samples);

bool has_stats(const Container& c, const std::string& weight_name);
LayerStats read_stats(const Container& c, const std::string& weight_name);

}  // namespace gblm
