#pragma once

// Optimal Brain Surgeon with the first-order gradient term, on small dense
// quadratic models. Everything here is double precision with explicit
// inverses; dimension is capped at kMaxObsDim.
//
// For a loss expanded around w as  dE = g'dw + 1/2 dw'H dw, removing weight m
// under the constraint e_m'dw + w_m = 0 gives, with c = (H^-1)_mm and
// u = H^-1 g:
//
//   lambda = (w_m - u_m) / c
//   dw     = -H^-1 (lambda e_m + g)
//   dE     = w_m^2/(2c) - w_m u_m / c + u_m^2/(2c) - 1/2 g'u
//
// Dropping the two terms quadratic in g leaves the first-order saliency; a
// diagonal H = 2 diag(||x_j||^2) reduces that to (w_m ||x_m||)^2 - w_m g_m.

#include <string>
#include <vector>

#include "gblm/common.hpp"

namespace gblm {

inline constexpr Index kMaxObsDim = 512;

struct QuadModel {
  VectorD w;
  VectorD g;
  MatrixD hessian;
  double damping = 0.0;

  /// Throws ShapeError/NumericError when dimensions disagree, n exceeds
  /// kMaxObsDim, or H is not symmetric to 1e-12.
  void validate() const;
  Index size() const noexcept { return w.size(); }
};

struct ObsSolution {
  Index m = 0;
  VectorD delta_w;
  double lagrange_lambda = 0.0;
  double delta_e = 0.0;
};

/// Fault injection for the verification suite: lets a test confirm the
/// oracles catch a wrong saliency formula.
enum class SaliencyMutation { none, drop_third_term };

/// Inverse of `h` (which already includes any damping). Throws
/// NumericError carrying the reciprocal condition estimate when singular.
MatrixD checked_inverse(const MatrixD& h);

/// Inverse of h, retrying once with damping 1e-8 * trace(h) / n added to
/// the diagonal if the plain inverse is singular.
MatrixD inverse_with_fallback_damping(const MatrixD& h);

/// factor_two ? 2 X'X + damping I : X'X + damping I
MatrixD hessian_from_acts(const MatrixD& x_rows, double damping, bool factor_two);

ObsSolution obs_delta_e_full(const QuadModel& q, Index m,
                             SaliencyMutation mutation = SaliencyMutation::none);
double obs_delta_e_first_order(const QuadModel& q, Index m);
double obs_delta_e_diag(double w_m, double x_norm_m, double g_m);

/// Classic zero-gradient OBS saliency w_m^2 / (2 (H^-1)_mm).
double obs_saliency_classic(const QuadModel& q, Index m);

/// The quadratic objective g'dw + 1/2 dw'H dw (H including damping).
double quadratic_objective(const QuadModel& q, const VectorD& delta_w);

/// |W[i,j]|^2 / diag(H^-1)[j], one Hessian shared by all rows.
MatrixD sparsegpt_metric(const MatrixD& w, const MatrixD& hessian);

/// Re-solves the kept weights of one row to minimise (w'-w)'H(w'-w) with the
/// pruned entries fixed at zero: H_KK dK = H_KP w_P.
VectorD obs_weight_update(const VectorD& w_row, const std::vector<bool>& pruned, const MatrixD& hessian);

}  // namespace gblm
