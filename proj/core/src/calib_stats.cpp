#include "gblm/calib_stats.hpp"

#include <cmath>
#include <limits>

namespace gblm {

namespace {

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const char* what) {
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      if (!std::isfinite(static_cast<double>(m(i, j)))) {
        throw NumericError(std::string(what) + ": non-finite entry at (" + std::to_string(i) + "," +
                           std::to_string(j) + "); sample rejected");
      }
    }
  }
}

std::uint64_t scalar_record(const Container& c, std::string_view name) {
  const auto values = c.at(name).to_f64();
  if (values.size() != 1 || !(values[0] >= 0) || values[0] != std::floor(values[0])) {
    throw InputError("record '" + std::string(name) + "' must hold one nonnegative integer");
  }
  return static_cast<std::uint64_t>(values[0]);
}

}  // namespace

std::string_view grad_norm_name(GradNorm p) noexcept {
  switch (p) {
    case GradNorm::acc: return "acc";
    case GradNorm::l1: return "l1";
    case GradNorm::l2: return "l2";
  }
  return "?";
}

GradNorm parse_grad_norm(std::string_view name) {
  if (name == "acc") return GradNorm::acc;
  if (name == "l1") return GradNorm::l1;
  if (name == "l2") return GradNorm::l2;
  throw InputError("unknown gradient norm '" + std::string(name) + "' (expected acc, l1 or l2)");
}

std::uint64_t LayerStats::element_count(Index d_out, Index d_in) {
  if (d_out < 1 || d_in < 1) {
    throw ShapeError("layer dimensions must be positive, got (" + std::to_string(d_out) + "," +
                     std::to_string(d_in) + ")");
  }
  const auto a = static_cast<std::uint64_t>(d_out);
  const auto b = static_cast<std::uint64_t>(d_in);
  if (a > std::numeric_limits<std::uint64_t>::max() / sizeof(double) / b) {
    throw ShapeError("layer size overflows");
  }
  return a * b;
}

LayerStats::LayerStats(Index d_out, Index d_in) {
  element_count(d_out, d_in);
  grad_abs_sum_ = MatrixD::Zero(d_out, d_in);
  grad_sq_sum_ = MatrixD::Zero(d_out, d_in);
  grad_sum_ = MatrixD::Zero(d_out, d_in);
  act_sq_sum_ = VectorD::Zero(d_in);
}

void LayerStats::accumulate_gradient(const MatrixD& g) {
  if (g.rows() != d_out() || g.cols() != d_in()) {
    throw ShapeError("gradient sample shape (" + std::to_string(g.rows()) + "," +
                     std::to_string(g.cols()) + ") does not match layer (" + std::to_string(d_out()) +
                     "," + std::to_string(d_in()) + ")");
  }
  require_finite(g, "gradient");
  grad_abs_sum_ += g.cwiseAbs();
  grad_sq_sum_ += g.cwiseAbs2();
  grad_sum_ += g;
  ++n_samples_;
}

void LayerStats::accumulate_gradient(const MatrixF& g) { accumulate_gradient(MatrixD(g.cast<double>())); }

void LayerStats::accumulate_activations(const MatrixD& x) {
  if (x.cols() != d_in()) {
    throw ShapeError("activation rows have " + std::to_string(x.cols()) + " columns, layer expects " +
                     std::to_string(d_in()));
  }
  if (x.rows() == 0) return;
  require_finite(x, "activations");
  act_sq_sum_ += x.cwiseAbs2().colwise().sum().transpose();
  n_act_rows_ += static_cast<std::uint64_t>(x.rows());
}

void LayerStats::merge(const LayerStats& other) {
  if (other.d_out() != d_out() || other.d_in() != d_in()) {
    throw ShapeError("cannot merge statistics of different layer shapes");
  }
  grad_abs_sum_ += other.grad_abs_sum_;
  grad_sq_sum_ += other.grad_sq_sum_;
  grad_sum_ += other.grad_sum_;
  act_sq_sum_ += other.act_sq_sum_;
  n_samples_ += other.n_samples_;
  n_act_rows_ += other.n_act_rows_;
}

MatrixD LayerStats::grad_norm(GradNorm p) const {
  if (n_samples_ == 0) throw NumericError("gradient norm requested with zero accumulated samples");
  switch (p) {
    case GradNorm::acc: return grad_sum_.cwiseAbs();
    case GradNorm::l1: return grad_abs_sum_;
    case GradNorm::l2: return grad_sq_sum_.cwiseSqrt();
  }
  return {};
}

VectorD LayerStats::act_norm() const {
  if (n_act_rows_ == 0) throw NumericError("activation norm requested with zero accumulated rows");
  return act_sq_sum_.cwiseSqrt();
}

LayerStats LayerStats::from_sums(MatrixD grad_abs_sum, MatrixD grad_sq_sum, MatrixD grad_sum,
                                 VectorD act_sq_sum, std::uint64_t n_samples,
                                 std::uint64_t n_act_rows) {
  LayerStats s(grad_abs_sum.rows(), grad_abs_sum.cols());
  if (grad_sq_sum.rows() != s.d_out() || grad_sq_sum.cols() != s.d_in() ||
      grad_sum.rows() != s.d_out() || grad_sum.cols() != s.d_in() || act_sq_sum.size() != s.d_in()) {
    throw ShapeError("statistics accumulators disagree in shape");
  }
  require_finite(grad_abs_sum, "grad_abs_sum");
  require_finite(grad_sq_sum, "grad_sq_sum");
  require_finite(grad_sum, "grad_sum");
  require_finite(act_sq_sum, "act_sq_sum");
  for (Index i = 0; i < s.d_out(); ++i) {
    for (Index j = 0; j < s.d_in(); ++j) {
      const auto where = "(" + std::to_string(i) + "," + std::to_string(j) + ")";
      if (grad_sq_sum(i, j) < 0) throw NumericError("grad_sq_sum negative at " + where);
      // Summation order may differ between producers; allow rounding slack.
      const double a = grad_abs_sum(i, j);
      if (std::abs(grad_sum(i, j)) > a + 1e-12 * a + std::numeric_limits<double>::min()) {
        throw NumericError("|grad_sum| exceeds grad_abs_sum at " + where);
      }
    }
  }
  for (Index j = 0; j < s.d_in(); ++j) {
    if (act_sq_sum(j) < 0) throw NumericError("act_sq_sum negative at column " + std::to_string(j));
  }
  s.grad_abs_sum_ = std::move(grad_abs_sum);
  s.grad_sq_sum_ = std::move(grad_sq_sum);
  s.grad_sum_ = std::move(grad_sum);
  s.act_sq_sum_ = std::move(act_sq_sum);
  s.n_samples_ = n_samples;
  s.n_act_rows_ = n_act_rows;
  return s;
}

void write_stats(Container& c, const std::string& w, const LayerStats& s) {
  c.put(TensorRecord::from_matrix(w + ".grad_abs_sum", s.grad_abs_sum()));
  c.put(TensorRecord::from_matrix(w + ".grad_sq_sum", s.grad_sq_sum()));
  c.put(TensorRecord::from_matrix(w + ".grad_sum", s.grad_sum()));
  c.put(TensorRecord::from_f64(w + ".act_sq_sum", {static_cast<std::uint64_t>(s.d_in())},
                               {s.act_sq_sum().data(), static_cast<std::size_t>(s.d_in())}));
  const double rows = static_cast<double>(s.n_act_rows());
  c.put(TensorRecord::from_f64(w + ".act_rows", {1}, {&rows, 1}));
}

void write_sample_count(Container& c, std::uint64_t n_samples) {
  const double n = static_cast<double>(n_samples);
  c.put(TensorRecord::from_f64(std::string(kSamplesRecord), {1}, {&n, 1}));
}

bool has_stats(const Container& c, const std::string& w) {
  return c.contains(w + ".grad_abs_sum") && c.contains(w + ".grad_sq_sum") &&
         c.contains(w + ".grad_sum") && c.contains(w + ".act_sq_sum");
}

LayerStats read_stats(const Container& c, const std::string& w) {
  if (!has_stats(c, w)) throw InputError("missing calibration statistics for layer '" + w + "'");
  const auto n_samples = scalar_record(c, kSamplesRecord);
  const auto act_rows_name = w + ".act_rows";
  const auto n_rows = c.contains(act_rows_name) ? scalar_record(c, act_rows_name) : n_samples;
  const auto act = c.at(w + ".act_sq_sum");
  if (act.shape.size() != 1) throw ShapeError("record '" + act.name + "' must be a vector");
  const auto act_values = act.to_f64();
  VectorD act_sq = Eigen::Map<const VectorD>(act_values.data(), static_cast<Index>(act_values.size()));
  return LayerStats::from_sums(c.at(w + ".grad_abs_sum").to_matrix(), c.at(w + ".grad_sq_sum").to_matrix(),
                               c.at(w + ".grad_sum").to_matrix(), std::move(act_sq), n_samples, n_rows);
}

}  // namespace gblm
