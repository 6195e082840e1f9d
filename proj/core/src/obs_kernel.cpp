#include "gblm/obs_kernel.hpp"

#include <cmath>
#include <sstream>

#include <Eigen/LU>

namespace gblm {

namespace {

constexpr double kMinRcond = 1e-13;

using MatrixCM = Eigen::MatrixXd;

void check_index(const QuadModel& q, Index m) {
  if (m < 0 || m >= q.size()) {
    throw InputError("weight index " + std::to_string(m) + " outside [0," + std::to_string(q.size()) + ")");
  }
}

MatrixD damped_hessian(const QuadModel& q) {
  MatrixD h = q.hessian;
  h.diagonal().array() += q.damping;
  return h;
}

}  // namespace

void QuadModel::validate() const {
  const Index n = w.size();
  if (n < 1) throw ShapeError("quadratic model needs at least one weight");
  if (n > kMaxObsDim) throw ShapeError("quadratic model dimension " + std::to_string(n) + " exceeds 512");
  if (g.size() != n || hessian.rows() != n || hessian.cols() != n) {
    throw ShapeError("w, g and H dimensions disagree");
  }
  if (!(damping >= 0.0) || !std::isfinite(damping)) throw NumericError("damping must be finite and >= 0");
  const double asym = (hessian - hessian.transpose()).cwiseAbs().maxCoeff();
  if (!(asym <= 1e-12 * std::max(1.0, hessian.cwiseAbs().maxCoeff()))) {
    throw NumericError("Hessian is not symmetric (max asymmetry " + std::to_string(asym) + ")");
  }
}

MatrixD checked_inverse(const MatrixD& h) {
  if (h.rows() != h.cols()) throw ShapeError("cannot invert a non-square matrix");
  if (h.rows() > kMaxObsDim) throw ShapeError("matrix dimension exceeds 512");
  if (!h.allFinite()) throw NumericError("matrix has non-finite entries");
  const MatrixCM hc = h;
  Eigen::PartialPivLU<MatrixCM> lu(hc);
  const double rcond = lu.rcond();
  if (!(rcond >= kMinRcond)) {
    std::ostringstream os;
    os << "singular Hessian (reciprocal condition estimate " << rcond << ")";
    throw NumericError(os.str());
  }
  return MatrixD(lu.inverse());
}

MatrixD inverse_with_fallback_damping(const MatrixD& h) {
  try {
    return checked_inverse(h);
  } catch (const NumericError&) {
    const double lambda = 1e-8 * h.trace() / static_cast<double>(h.rows());
    if (!(lambda > 0.0)) throw;
    MatrixD damped = h;
    damped.diagonal().array() += lambda;
    return checked_inverse(damped);
  }
}

MatrixD hessian_from_acts(const MatrixD& x, double damping, bool factor_two) {
  if (x.rows() < 1) throw ShapeError("Hessian needs at least one activation row");
  if (x.cols() > kMaxObsDim) throw ShapeError("activation width exceeds 512");
  MatrixD h = x.transpose() * x;
  if (factor_two) h *= 2.0;
  h.diagonal().array() += damping;
  return h;
}

ObsSolution obs_delta_e_full(const QuadModel& q, Index m, SaliencyMutation mutation) {
  q.validate();
  check_index(q, m);
  const MatrixD hinv = checked_inverse(damped_hessian(q));
  const VectorD u = hinv * q.g;
  const double c = hinv(m, m);
  const double wm = q.w(m);

  ObsSolution s;
  s.m = m;
  s.lagrange_lambda = (wm - u(m)) / c;
  s.delta_w = -(s.lagrange_lambda * hinv.col(m) + u);
  s.delta_w(m) = -wm;

  const double first = wm * wm / (2.0 * c);
  const double second = -wm * u(m) / c;
  const double third = mutation == SaliencyMutation::drop_third_term ? 0.0 : u(m) * u(m) / (2.0 * c);
  const double fourth = -0.5 * q.g.dot(u);
  s.delta_e = first + second + third + fourth;
  return s;
}

double obs_delta_e_first_order(const QuadModel& q, Index m) {
  q.validate();
  check_index(q, m);
  const MatrixD hinv = checked_inverse(damped_hessian(q));
  const double c = hinv(m, m);
  const double gh = q.g.dot(hinv.col(m));
  return q.w(m) * q.w(m) / (2.0 * c) - q.w(m) * gh / c;
}

double obs_delta_e_diag(double w_m, double x_norm_m, double g_m) {
  const double a = w_m * x_norm_m;
  return a * a - w_m * g_m;
}

double obs_saliency_classic(const QuadModel& q, Index m) {
  q.validate();
  check_index(q, m);
  const MatrixD hinv = checked_inverse(damped_hessian(q));
  return q.w(m) * q.w(m) / (2.0 * hinv(m, m));
}

double quadratic_objective(const QuadModel& q, const VectorD& dw) {
  if (dw.size() != q.size()) throw ShapeError("perturbation size does not match model");
  return q.g.dot(dw) + 0.5 * dw.dot(damped_hessian(q) * dw);
}

MatrixD sparsegpt_metric(const MatrixD& w, const MatrixD& hessian) {
  if (hessian.rows() != w.cols() || hessian.cols() != w.cols()) {
    throw ShapeError("Hessian must be d_in x d_in for the weight matrix");
  }
  const VectorD d = inverse_with_fallback_damping(hessian).diagonal();
  MatrixD out = w.cwiseAbs2();
  for (Index j = 0; j < out.cols(); ++j) out.col(j) /= d(j);
  return out;
}

VectorD obs_weight_update(const VectorD& w, const std::vector<bool>& pruned, const MatrixD& h) {
  const Index n = w.size();
  if (static_cast<Index>(pruned.size()) != n || h.rows() != n || h.cols() != n) {
    throw ShapeError("weight row, mask and Hessian dimensions disagree");
  }
  std::vector<Index> kept, cut;
  for (Index k = 0; k < n; ++k) (pruned[static_cast<std::size_t>(k)] ? cut : kept).push_back(k);
  if (kept.empty()) throw InputError("weight update needs at least one kept weight");

  VectorD out = w;
  if (cut.empty()) return out;

  const auto nk = static_cast<Index>(kept.size());
  const auto np = static_cast<Index>(cut.size());
  MatrixD hkk(nk, nk), hkp(nk, np);
  VectorD wp(np);
  for (Index a = 0; a < nk; ++a) {
    for (Index b = 0; b < nk; ++b) hkk(a, b) = h(kept[a], kept[b]);
    for (Index b = 0; b < np; ++b) hkp(a, b) = h(kept[a], cut[b]);
  }
  for (Index b = 0; b < np; ++b) wp(b) = w(cut[b]);

  MatrixD hkk_inv;
  try {
    hkk_inv = checked_inverse(hkk);
  } catch (const NumericError& e) {
    throw NumericError(std::string("kept-weight submatrix is singular; add damping: ") + e.what());
  }
  const VectorD delta = hkk_inv * (hkp * wp);
  for (Index a = 0; a < nk; ++a) out(kept[a]) += delta(a);
  for (Index k : cut) out(k) = 0.0;
  return out;
}

}  // namespace gblm
