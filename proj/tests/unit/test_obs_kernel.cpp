#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "gblm/obs_kernel.hpp"
#include "gblm/verify.hpp"
#include "test_support.hpp"

namespace gblm {
namespace {

// Reference solution by eliminating the constrained coordinate: with
// d_m = -w_m fixed, the free coordinates solve H_FF d_F = -g_F - H_Fm d_m.
std::pair<VectorD, double> eliminate(const QuadModel& q, Index m) {
  const Index n = q.size();
  std::vector<Index> free;
  for (Index k = 0; k < n; ++k)
    if (k != m) free.push_back(k);
  VectorD d = VectorD::Zero(n);
  d(m) = -q.w(m);
  if (!free.empty()) {
    const auto f = static_cast<Index>(free.size());
    MatrixD hff(f, f);
    VectorD rhs(f);
    for (Index a = 0; a < f; ++a) {
      rhs(a) = -q.g(free[a]) - q.hessian(free[a], m) * d(m);
      for (Index b = 0; b < f; ++b) hff(a, b) = q.hessian(free[a], free[b]);
    }
    const VectorD df = hff.ldlt().solve(rhs);
    for (Index a = 0; a < f; ++a) d(free[a]) = df(a);
  }
  const double e = q.g.dot(d) + 0.5 * d.dot(q.hessian * d);
  return {d, e};
}

TEST(ObsKernel, HessianFromActivations) {
  MatrixD x(2, 2);
  x << 1, 0, 0, 2;
  MatrixD expected(2, 2);
  expected << 2, 0, 0, 8;
  EXPECT_EQ(hessian_from_acts(x, 0.0, true), expected);
  expected << 1.5, 0, 0, 4.5;
  EXPECT_EQ(hessian_from_acts(x, 0.5, false), expected);
  EXPECT_THROW(hessian_from_acts(MatrixD(0, 2), 0.0, true), ShapeError);

  MatrixD orth(3, 2);
  orth << 1, 0, 2, 0, 0, 3;
  const MatrixD h = hessian_from_acts(orth, 0.0, true);
  EXPECT_EQ(h(0, 1), 0.0);
  EXPECT_EQ(h(0, 0), 2 * 5.0);
  EXPECT_EQ(h(1, 1), 2 * 9.0);
}

TEST(ObsKernel, ZeroGradientClassicExample) {
  QuadModel q{VectorD::Zero(3), VectorD::Zero(3), 2.0 * MatrixD::Identity(3, 3), 0.0};
  q.w << 1, 3, -2;
  const auto s = obs_delta_e_full(q, 1);
  EXPECT_DOUBLE_EQ(s.delta_e, 9.0);
  EXPECT_TRUE(s.delta_w.isApprox((VectorD(3) << 0, -3, 0).finished()));
  EXPECT_DOUBLE_EQ(obs_saliency_classic(q, 1), 9.0);
  EXPECT_DOUBLE_EQ(obs_delta_e_first_order(q, 1), 9.0);
}

TEST(ObsKernel, ClosedFormMatchesEliminationOracle) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const Index n = 2 + static_cast<Index>(seed % 9);
    const auto q = random_quad_model(seed, n);
    for (Index m = 0; m < n; ++m) {
      const auto s = obs_delta_e_full(q, m);
      const auto [d, e] = eliminate(q, m);
      EXPECT_NEAR(s.delta_e, e, 1e-9 * (1 + std::abs(e)));
      EXPECT_LT((s.delta_w - d).lpNorm<Eigen::Infinity>(), 1e-8 * (1 + d.lpNorm<Eigen::Infinity>()));
      EXPECT_EQ(s.delta_w(m) + q.w(m), 0.0);
      EXPECT_NEAR(s.delta_e, quadratic_objective(q, s.delta_w), 1e-10);
    }
  }
}

TEST(ObsKernel, LagrangeMultiplierAndStationarity) {
  const auto q = random_quad_model(99, 6);
  const MatrixD hinv = q.hessian.inverse();
  for (Index m = 0; m < 6; ++m) {
    const auto s = obs_delta_e_full(q, m);
    const VectorD u = hinv * q.g;
    EXPECT_NEAR(s.lagrange_lambda, (q.w(m) - u(m)) / hinv(m, m), 1e-10);
    // Gradient of the Lagrangian vanishes: g + H dw + lambda e_m = 0.
    VectorD r = q.g + q.hessian * s.delta_w;
    r(m) += s.lagrange_lambda;
    EXPECT_LT(r.lpNorm<Eigen::Infinity>(), 1e-10);
  }
}

TEST(ObsKernel, FirstOrderDropsTermsQuadraticInGradient) {
  const auto q = random_quad_model(5, 5);
  const MatrixD hinv = q.hessian.inverse();
  const VectorD u = hinv * q.g;
  for (Index m = 0; m < 5; ++m) {
    const double c = hinv(m, m);
    const double expected = q.w(m) * q.w(m) / (2 * c) - q.w(m) * u(m) / c;
    EXPECT_NEAR(obs_delta_e_first_order(q, m), expected, 1e-12 * (1 + std::abs(expected)));
    const double full = expected + u(m) * u(m) / (2 * c) - 0.5 * q.g.dot(u);
    EXPECT_NEAR(obs_delta_e_full(q, m).delta_e, full, 1e-10 * (1 + std::abs(full)));
  }
}

TEST(ObsKernel, MutationChangesFullSaliency) {
  const auto q = random_quad_model(8, 4);
  const auto good = obs_delta_e_full(q, 2);
  const auto bad = obs_delta_e_full(q, 2, SaliencyMutation::drop_third_term);
  EXPECT_GT(std::abs(good.delta_e - bad.delta_e), 1e-8);
}

TEST(ObsKernel, DiagonalSaliency) {
  EXPECT_DOUBLE_EQ(obs_delta_e_diag(2, 3, 0.5), 35.0);
  EXPECT_DOUBLE_EQ(obs_delta_e_diag(2, 3, 0.0), 36.0);
  const VectorD xn = (VectorD(4) << 0.5, 1.0, 2.0, 3.0).finished();
  QuadModel q{(VectorD(4) << 1, -2, 0.5, 3).finished(), (VectorD(4) << 0.1, 0.2, -0.3, 1).finished(),
              MatrixD(2.0 * xn.cwiseAbs2().asDiagonal()), 0.0};
  for (Index m = 0; m < 4; ++m) {
    EXPECT_NEAR(obs_delta_e_first_order(q, m), obs_delta_e_diag(q.w(m), xn(m), q.g(m)), 1e-12);
  }
}

TEST(ObsKernel, SparseGptMetric) {
  const MatrixD w = testing::random_matrix(3, 4, 5);
  EXPECT_TRUE(sparsegpt_metric(w, MatrixD::Identity(5, 5)).isApprox(w.cwiseAbs2(), 1e-15));
  const VectorD d = (VectorD(5) << 1, 2, 3, 4, 5).finished();
  const MatrixD expected = w.cwiseAbs2() * d.asDiagonal();
  EXPECT_TRUE(sparsegpt_metric(w, MatrixD(d.asDiagonal())).isApprox(expected, 1e-14));
  EXPECT_THROW(sparsegpt_metric(w, MatrixD::Identity(4, 4)), ShapeError);
  EXPECT_THROW(sparsegpt_metric(w, MatrixD::Zero(5, 5)), NumericError);
}

TEST(ObsKernel, WeightUpdateTrivialCases) {
  const VectorD w = testing::random_vector(4, 6);
  const MatrixD x = testing::random_matrix(5, 12, 6);
  const MatrixD h = hessian_from_acts(x, 0.0, false);
  EXPECT_TRUE(obs_weight_update(w, std::vector<bool>(6, false), h).isApprox(w, 1e-12));
  const VectorD d = (VectorD(6) << 1, 2, 3, 4, 5, 6).finished();
  const std::vector<bool> pruned = {true, false, true, false, false, true};
  const VectorD upd = obs_weight_update(w, pruned, MatrixD(d.asDiagonal()));
  for (Index k = 0; k < 6; ++k) EXPECT_DOUBLE_EQ(upd(k), pruned[static_cast<std::size_t>(k)] ? 0.0 : w(k));
  EXPECT_THROW(obs_weight_update(w, std::vector<bool>(6, true), h), InputError);
}

TEST(ObsKernel, WeightUpdateReducesReconstructionError) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const VectorD w = testing::random_vector(seed + 100, 8);
    const MatrixD x = testing::random_matrix(seed + 200, 20, 8);
    const MatrixD h = hessian_from_acts(x, 0.0, false);
    std::vector<bool> pruned(8, false);
    for (Index k = 0; k < 8; k += 2) pruned[static_cast<std::size_t>(k + (seed % 2))] = true;
    VectorD zeroed = w;
    for (Index k = 0; k < 8; ++k)
      if (pruned[static_cast<std::size_t>(k)]) zeroed(k) = 0;
    const VectorD upd = obs_weight_update(w, pruned, h);
    EXPECT_LT((x * (upd - w)).squaredNorm(), (x * (zeroed - w)).squaredNorm());
  }
}

TEST(ObsKernel, SingularKeptSubmatrixIsReported) {
  MatrixD h = MatrixD::Zero(3, 3);
  h(0, 0) = 1;
  EXPECT_THROW(obs_weight_update(VectorD::Ones(3), {true, false, false}, h), NumericError);
}

TEST(ObsKernel, InversionAndValidation) {
  EXPECT_THROW(checked_inverse(MatrixD::Zero(3, 3)), NumericError);
  MatrixD rank_def = MatrixD::Ones(3, 3);
  EXPECT_THROW(checked_inverse(rank_def), NumericError);
  const MatrixD damped = inverse_with_fallback_damping(rank_def);
  EXPECT_TRUE(damped.allFinite());
  const MatrixD spd = random_quad_model(3, 5).hessian;
  EXPECT_TRUE((checked_inverse(spd) * spd).isApprox(MatrixD::Identity(5, 5), 1e-10));

  QuadModel q = random_quad_model(2, 3);
  q.hessian(0, 1) += 1e-6;
  EXPECT_THROW(q.validate(), NumericError);
  QuadModel big{VectorD::Zero(513), VectorD::Zero(513), MatrixD::Identity(513, 513), 0.0};
  EXPECT_THROW(big.validate(), ShapeError);
  QuadModel ok = random_quad_model(2, 3);
  EXPECT_THROW(obs_delta_e_full(ok, 3), InputError);
  EXPECT_THROW(obs_delta_e_full({VectorD::Ones(2), VectorD::Zero(2), MatrixD::Zero(2, 2), 0.0}, 0), NumericError);
}

TEST(ObsKernel, DampingEntersTheHessian) {
  QuadModel q{(VectorD(2) << 1, 1).finished(), VectorD::Zero(2), MatrixD::Zero(2, 2), 2.0};
  // H + damping I = 2I, so the classic saliency is w^2 / (2 * 0.5).
  EXPECT_DOUBLE_EQ(obs_saliency_classic(q, 0), 1.0);
}

}  // namespace
}  // namespace gblm
