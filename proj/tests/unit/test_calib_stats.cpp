#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "gblm/calib_stats.hpp"
#include "test_support.hpp"

namespace gblm {
namespace {

MatrixD scalar(double v) { return MatrixD::Constant(1, 1, v); }

TEST(LayerStats, StartsAtZero) {
  LayerStats s(2, 3);
  EXPECT_EQ(s.grad_abs_sum(), MatrixD::Zero(2, 3));
  EXPECT_EQ(s.grad_sq_sum(), MatrixD::Zero(2, 3));
  EXPECT_EQ(s.grad_sum(), MatrixD::Zero(2, 3));
  EXPECT_EQ(s.act_sq_sum(), VectorD::Zero(3));
  EXPECT_EQ(s.n_samples(), 0u);
  LayerStats one(1, 1);
  EXPECT_EQ(one.grad_sum()(0, 0), 0.0);
}

TEST(LayerStats, RejectsNonpositiveDimensions) {
  EXPECT_THROW(LayerStats(0, 3), ShapeError);
  EXPECT_THROW(LayerStats(2, -1), ShapeError);
  EXPECT_EQ(LayerStats::element_count(4096, 4096), 4096u * 4096u);
}

TEST(LayerStats, TwoScalarSamples) {
  LayerStats s(1, 1);
  s.accumulate_gradient(scalar(3));
  s.accumulate_gradient(scalar(-4));
  EXPECT_EQ(s.grad_abs_sum()(0, 0), 7);
  EXPECT_EQ(s.grad_sq_sum()(0, 0), 25);
  EXPECT_EQ(s.grad_sum()(0, 0), -1);
  EXPECT_EQ(s.grad_norm(GradNorm::l1)(0, 0), 7);
  EXPECT_EQ(s.grad_norm(GradNorm::l2)(0, 0), 5);
  EXPECT_EQ(s.grad_norm(GradNorm::acc)(0, 0), 1);
  EXPECT_EQ(s.n_samples(), 2u);
}

TEST(LayerStats, ZeroSampleOnlyBumpsCount) {
  LayerStats s(2, 2);
  s.accumulate_gradient(MatrixD::Zero(2, 2));
  EXPECT_EQ(s.n_samples(), 1u);
  for (auto p : {GradNorm::acc, GradNorm::l1, GradNorm::l2}) EXPECT_EQ(s.grad_norm(p), MatrixD::Zero(2, 2));
}

TEST(LayerStats, SquaredSumsMatchTwoPassOracle) {
  constexpr int n = 128;
  LayerStats s(4, 5);
  std::vector<MatrixD> samples;
  for (int k = 0; k < n; ++k) {
    samples.push_back(testing::random_matrix(100 + k, 4, 5));
    s.accumulate_gradient(samples.back());
  }
  for (Index i = 0; i < 4; ++i) {
    for (Index j = 0; j < 5; ++j) {
      std::vector<double> sq;
      for (const auto& g : samples) sq.push_back(g(i, j) * g(i, j));
      std::sort(sq.begin(), sq.end());
      const double oracle = std::accumulate(sq.begin(), sq.end(), 0.0);
      EXPECT_NEAR(s.grad_sq_sum()(i, j), oracle, 1e-12 * oracle);
    }
  }
}

TEST(LayerStats, Float32SamplesAccumulateInDouble) {
  LayerStats s(1, 1);
  MatrixF g(1, 1);
  g(0, 0) = 0.1f;
  for (int k = 0; k < 1000; ++k) s.accumulate_gradient(g);
  const double exact = 1000.0 * static_cast<double>(0.1f);
  EXPECT_NEAR(s.grad_sum()(0, 0), exact, 1e-12 * exact);
}

TEST(LayerStats, NonFiniteSampleIsRejectedWhole) {
  LayerStats s(2, 2);
  s.accumulate_gradient(MatrixD::Ones(2, 2));
  MatrixD bad = MatrixD::Ones(2, 2);
  bad(1, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    s.accumulate_gradient(bad);
    FAIL() << "NaN accepted";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("(1,0)"), std::string::npos);
  }
  EXPECT_EQ(s.n_samples(), 1u);
  EXPECT_EQ(s.grad_sum(), MatrixD::Ones(2, 2));
  EXPECT_THROW(s.accumulate_gradient(MatrixD::Ones(3, 2)), ShapeError);
}

TEST(LayerStats, ActivationSquaredColumnSums) {
  LayerStats s(1, 2);
  MatrixD x(2, 2);
  x << 1, 2, 3, 4;
  s.accumulate_activations(x);
  EXPECT_EQ(s.act_sq_sum(), (VectorD(2) << 10, 20).finished());
  EXPECT_EQ(s.n_act_rows(), 2u);
  const VectorD norm = s.act_norm();
  EXPECT_DOUBLE_EQ(norm(0), std::sqrt(10.0));
  EXPECT_DOUBLE_EQ(norm(1), std::sqrt(20.0));
  s.accumulate_activations(MatrixD(0, 2));
  EXPECT_EQ(s.n_act_rows(), 2u);
  EXPECT_THROW(s.accumulate_activations(MatrixD::Ones(1, 3)), ShapeError);
  MatrixD inf = MatrixD::Ones(1, 2);
  inf(0, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(s.accumulate_activations(inf), NumericError);
}

TEST(LayerStats, SingleRowNormIsAbsoluteValue) {
  LayerStats s(1, 2);
  MatrixD x(1, 2);
  x << 3, -4;
  s.accumulate_activations(x);
  EXPECT_EQ(s.act_norm(), (VectorD(2) << 3, 4).finished());
}

TEST(LayerStats, ActNormOfStreamMatchesDirectColumnNorm) {
  const MatrixD x = testing::random_matrix(7, 1000, 6);
  LayerStats s(1, 6);
  for (Index r = 0; r < 1000; r += 37) s.accumulate_activations(x.middleRows(r, std::min<Index>(37, 1000 - r)));
  const VectorD direct = x.colwise().norm().transpose();
  for (Index j = 0; j < 6; ++j) EXPECT_NEAR(s.act_norm()(j), direct(j), 1e-10 * direct(j));

  LayerStats split(1, 6), whole(1, 6);
  split.accumulate_activations(x.topRows(400));
  split.accumulate_activations(x.bottomRows(600));
  whole.accumulate_activations(x);
  EXPECT_TRUE(split.act_norm().isApprox(whole.act_norm(), 1e-14));
}

TEST(LayerStats, NormsNeedData) {
  LayerStats s(1, 1);
  EXPECT_THROW(s.grad_norm(GradNorm::l1), NumericError);
  EXPECT_THROW(s.act_norm(), NumericError);
}

TEST(LayerStats, SingleSampleNormsCoincide) {
  LayerStats s(3, 3);
  const MatrixD g = testing::random_matrix(3, 3, 3);
  s.accumulate_gradient(g);
  const MatrixD a = g.cwiseAbs();
  EXPECT_TRUE(s.grad_norm(GradNorm::l1).isApprox(a, 1e-15));
  EXPECT_TRUE(s.grad_norm(GradNorm::l2).isApprox(a, 1e-15));
  EXPECT_TRUE(s.grad_norm(GradNorm::acc).isApprox(a, 1e-15));
}

TEST(LayerStats, OrderIndependence) {
  std::vector<MatrixD> samples;
  for (int k = 0; k < 20; ++k) samples.push_back(testing::random_matrix(50 + k, 3, 4));
  LayerStats fwd(3, 4), rev(3, 4);
  for (const auto& g : samples) fwd.accumulate_gradient(g);
  for (auto it = samples.rbegin(); it != samples.rend(); ++it) rev.accumulate_gradient(*it);
  for (auto p : {GradNorm::acc, GradNorm::l1, GradNorm::l2}) {
    EXPECT_TRUE(fwd.grad_norm(p).isApprox(rev.grad_norm(p), 1e-12));
  }

  // Integer-valued samples sum exactly in any order.
  LayerStats a(2, 2), b(2, 2);
  std::vector<MatrixD> ints;
  for (int k = 0; k < 10; ++k) ints.push_back(MatrixD::Constant(2, 2, k % 3 == 0 ? -k : k));
  for (const auto& g : ints) a.accumulate_gradient(g);
  for (auto it = ints.rbegin(); it != ints.rend(); ++it) b.accumulate_gradient(*it);
  EXPECT_EQ(a.grad_sum(), b.grad_sum());
  EXPECT_EQ(a.grad_sq_sum(), b.grad_sq_sum());
}

TEST(LayerStats, MonotoneNormsAndNonMonotoneAccumulation) {
  LayerStats s(1, 1);
  s.accumulate_gradient(scalar(2));
  const double l1 = s.grad_norm(GradNorm::l1)(0, 0);
  const double l2 = s.grad_norm(GradNorm::l2)(0, 0);
  const double acc = s.grad_norm(GradNorm::acc)(0, 0);
  s.accumulate_gradient(scalar(-1.5));
  EXPECT_GE(s.grad_norm(GradNorm::l1)(0, 0), l1);
  EXPECT_GE(s.grad_norm(GradNorm::l2)(0, 0), l2);
  EXPECT_LT(s.grad_norm(GradNorm::acc)(0, 0), acc);
}

TEST(LayerStats, CauchySchwarzBound) {
  LayerStats s(5, 5);
  for (int k = 0; k < 17; ++k) s.accumulate_gradient(testing::random_matrix(900 + k, 5, 5));
  const MatrixD l1 = s.grad_norm(GradNorm::l1);
  const MatrixD l2 = s.grad_norm(GradNorm::l2) * std::sqrt(17.0);
  const MatrixD acc = s.grad_norm(GradNorm::acc);
  for (Index k = 0; k < l1.size(); ++k) {
    EXPECT_LE(l1.data()[k], l2.data()[k] * (1 + 1e-15));
    EXPECT_LE(acc.data()[k], l1.data()[k] * (1 + 1e-15));
  }
}

TEST(LayerStats, MergeEqualsJointAccumulation) {
  LayerStats a(2, 3), b(2, 3), joint(2, 3);
  for (int k = 0; k < 6; ++k) {
    const MatrixD g = testing::random_matrix(300 + k, 2, 3);
    (k < 3 ? a : b).accumulate_gradient(g);
    joint.accumulate_gradient(g);
  }
  const MatrixD x = testing::random_matrix(9, 10, 3);
  a.accumulate_activations(x.topRows(4));
  b.accumulate_activations(x.bottomRows(6));
  joint.accumulate_activations(x);
  a.merge(b);
  EXPECT_EQ(a.n_samples(), 6u);
  EXPECT_EQ(a.n_act_rows(), 10u);
  EXPECT_TRUE(a.grad_sq_sum().isApprox(joint.grad_sq_sum(), 1e-14));
  EXPECT_TRUE(a.act_sq_sum().isApprox(joint.act_sq_sum(), 1e-14));
  EXPECT_THROW(a.merge(LayerStats(3, 2)), ShapeError);
}

TEST(LayerStats, ContainerRoundTrip) {
  LayerStats s(2, 3);
  for (int k = 0; k < 4; ++k) s.accumulate_gradient(testing::random_matrix(k, 2, 3));
  s.accumulate_activations(testing::random_matrix(77, 5, 3));
  Container c;
  write_stats(c, "layers.0.fc.weight", s);
  write_sample_count(c, 4);
  EXPECT_TRUE(c.contains("layers.0.fc.weight.grad_abs_sum"));
  EXPECT_TRUE(c.contains("layers.0.fc.weight.grad_sq_sum"));
  EXPECT_TRUE(c.contains("layers.0.fc.weight.grad_sum"));
  EXPECT_TRUE(c.contains("layers.0.fc.weight.act_sq_sum"));
  EXPECT_EQ(c.at("calib.n_samples").to_f64(), std::vector<double>{4});
  ASSERT_TRUE(has_stats(c, "layers.0.fc.weight"));
  const auto back = read_stats(decode_container(encode_container(c)), "layers.0.fc.weight");
  EXPECT_EQ(back.grad_sum(), s.grad_sum());
  EXPECT_EQ(back.act_sq_sum(), s.act_sq_sum());
  EXPECT_EQ(back.n_samples(), 4u);
  EXPECT_EQ(back.n_act_rows(), 5u);
  EXPECT_FALSE(has_stats(c, "layers.1.fc.weight"));
  EXPECT_THROW(read_stats(c, "layers.1.fc.weight"), InputError);
}

TEST(LayerStats, ImportValidatesInvariants) {
  MatrixD abs = MatrixD::Constant(1, 1, 1.0);
  MatrixD sq = MatrixD::Constant(1, 1, 1.0);
  MatrixD sum = MatrixD::Constant(1, 1, 2.0);
  EXPECT_THROW(LayerStats::from_sums(abs, sq, sum, VectorD::Ones(1), 1, 1), NumericError);
  EXPECT_THROW(LayerStats::from_sums(abs, -sq, MatrixD::Zero(1, 1), VectorD::Ones(1), 1, 1), NumericError);
  EXPECT_THROW(LayerStats::from_sums(abs, sq, MatrixD::Zero(1, 1), -VectorD::Ones(1), 1, 1), NumericError);
  EXPECT_NO_THROW(LayerStats::from_sums(abs, sq, MatrixD::Constant(1, 1, -1.0), VectorD::Ones(1), 1, 1));
}

TEST(GradNormNames, RoundTrip) {
  for (auto p : {GradNorm::acc, GradNorm::l1, GradNorm::l2}) EXPECT_EQ(parse_grad_norm(grad_norm_name(p)), p);
  EXPECT_THROW(parse_grad_norm("linf"), InputError);
}

}  // namespace
}  // namespace gblm
