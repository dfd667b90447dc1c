#include "oracles.hpp"

#include "sparse_ekp/core.hpp"
#include "sparse_ekp/random.hpp"

#include <gtest/gtest.h>

#include <numeric>

using namespace sparse_ekp;

namespace {

Rng rng_for(std::uint64_t s) { return make_rng({s, Purpose::Generic, 0, 0, 0}); }

}  // namespace

TEST(EnsembleStats, TwoMembersIdentityMap) {
  Matrix U(2, 2);
  U << 1, -1, 0, 0;
  const auto s = ensemble_stats(U, U);
  EXPECT_TRUE(s.m.isZero());
  Matrix expected = Matrix::Zero(2, 2);
  expected(0, 0) = 1.0;
  EXPECT_TRUE(s.Puu.isApprox(expected));
  EXPECT_TRUE(s.Puy.isApprox(expected));
  EXPECT_TRUE(s.Pyy.isApprox(expected));
}

TEST(EnsembleStats, IdenticalMembersGiveZeroCovariance) {
  Matrix U = Vector::LinSpaced(4, 1, 4).replicate(1, 5);
  Matrix Y = Vector::LinSpaced(3, -1, 1).replicate(1, 5);
  const auto s = ensemble_stats(U, Y);
  EXPECT_EQ(s.Puu.norm(), 0.0);
  EXPECT_EQ(s.Puy.norm(), 0.0);
  EXPECT_EQ(s.Pyy.norm(), 0.0);
}

TEST(EnsembleStats, UsesOneOverN) {
  Rng rng = rng_for(3);
  const Matrix U = oracle::random_matrix(3, 7, rng);
  const auto s = ensemble_stats(U, U);
  const Vector m = U.rowwise().mean();
  Matrix ref = Matrix::Zero(3, 3);
  for (Index n = 0; n < 7; ++n) ref += (U.col(n) - m) * (U.col(n) - m).transpose();
  ref /= 7.0;
  EXPECT_LT((s.Puu - ref).norm(), 1e-13);
}

TEST(EnsembleStats, LinearMapIdentities) {
  Rng rng = rng_for(4);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix U = oracle::random_matrix(5, 20, rng);
    const Matrix G = oracle::random_matrix(4, 5, rng);
    const auto s = ensemble_stats(U, G * U);
    EXPECT_LT((s.Puy - s.Puu * G.transpose()).norm(), 1e-10 * std::max(1.0, s.Puy.norm()));
    EXPECT_LT((s.Pyy - G * s.Puu * G.transpose()).norm(), 1e-10 * std::max(1.0, s.Pyy.norm()));
  }
}

TEST(EnsembleStats, PermutationInvariant) {
  Rng rng = rng_for(5);
  const Matrix U = oracle::random_matrix(4, 9, rng);
  const Matrix Y = oracle::random_matrix(3, 9, rng);
  std::vector<int> perm(9);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Matrix Up(4, 9), Yp(3, 9);
  for (int n = 0; n < 9; ++n) {
    Up.col(n) = U.col(perm[static_cast<std::size_t>(n)]);
    Yp.col(n) = Y.col(perm[static_cast<std::size_t>(n)]);
  }
  const auto a = ensemble_stats(U, Y), b = ensemble_stats(Up, Yp);
  EXPECT_LT((a.Puu - b.Puu).norm(), 1e-13);
  EXPECT_LT((a.Puy - b.Puy).norm(), 1e-13);
  EXPECT_LT((a.Pyy - b.Pyy).norm(), 1e-13);
  EXPECT_LT((a.m - b.m).norm(), 1e-14);
}

TEST(EnsembleStats, RejectsMismatchAndSingleMember) {
  EXPECT_THROW(ensemble_stats(Matrix::Zero(2, 3), Matrix::Zero(2, 4)), DimensionError);
  EXPECT_THROW(ensemble_stats(Matrix::Zero(2, 1), Matrix::Zero(2, 1)), DimensionError);
  EXPECT_THROW(Ensemble(Matrix::Zero(3, 1)), DimensionError);
}

TEST(Pseudoinverse, TrivialCases) {
  EXPECT_TRUE(pseudoinverse(Matrix::Identity(3, 3)).isApprox(Matrix::Identity(3, 3)));
  Matrix D = Matrix::Zero(2, 2);
  D(0, 0) = 2.0;
  Matrix E = Matrix::Zero(2, 2);
  E(0, 0) = 0.5;
  EXPECT_LT((pseudoinverse(D) - E).norm(), 1e-15);
  EXPECT_EQ(pseudoinverse(Matrix::Zero(3, 3)).norm(), 0.0);
}

TEST(Pseudoinverse, PenroseIdentitiesRankThree) {
  Rng rng = rng_for(6);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix B = oracle::random_matrix(5, 3, rng);
    const Matrix P = B * B.transpose();
    const Matrix X = pseudoinverse(P);
    EXPECT_LT((P * X * P - P).norm(), 1e-10 * P.norm());
    EXPECT_LT((X * P * X - X).norm(), 1e-10 * X.norm());
    EXPECT_LT(((P * X).transpose() - P * X).norm(), 1e-10);
    EXPECT_LT(((X * P).transpose() - X * P).norm(), 1e-10);
  }
}

TEST(StatisticalLinearization, RecoversLinearMap) {
  Rng rng = rng_for(7);
  const Matrix G = oracle::random_matrix(4, 4, rng);
  const Matrix U = oracle::random_matrix(4, 50, rng);
  const auto s = ensemble_stats(U, G * U);
  EXPECT_LT((statistical_linearization(s.Puy, s.Puu) - G).norm(), 1e-8);
}

TEST(StatisticalLinearization, ZeroCrossCovarianceAndRankOne) {
  EXPECT_EQ(statistical_linearization(Matrix::Zero(3, 2), Matrix::Identity(3, 3)).norm(), 0.0);
  Matrix U(3, 2);
  U << 1, -1, 2, 0, 0.5, 3;
  Rng rng = rng_for(8);
  const Matrix G = oracle::random_matrix(4, 3, rng);
  const auto s = ensemble_stats(U, G * U);
  const Matrix GN = statistical_linearization(s.Puy, s.Puu);
  Eigen::JacobiSVD<Matrix> svd(GN);
  const Vector sv = svd.singularValues();
  EXPECT_LT(sv(1), 1e-10 * sv(0));
}

TEST(StatisticalLinearization, UnchangedByMeanMember) {
  // Replacing a member by the ensemble mean adds no new direction.
  Rng rng = rng_for(9);
  const Matrix G = oracle::random_matrix(6, 8, rng);
  Matrix U = oracle::random_matrix(8, 5, rng);
  Matrix U2(8, 6);
  U2.leftCols(5) = U;
  U2.col(5) = U.rowwise().mean();
  const auto a = ensemble_stats(U, G * U);
  const auto b = ensemble_stats(U2, G * U2);
  const Matrix GA = statistical_linearization(a.Puy, a.Puu);
  const Matrix GB = statistical_linearization(b.Puy, b.Puu);
  EXPECT_LT((GA - GB).norm(), 1e-10 * GA.norm());
}

TEST(Mahalanobis, Basics) {
  EXPECT_EQ(mahalanobis_sq(Vector::Zero(3), Matrix::Identity(3, 3)), 0.0);
  Vector x(2);
  x << 3, 4;
  EXPECT_DOUBLE_EQ(mahalanobis_sq(x, Matrix::Identity(2, 2)), 25.0);
}

TEST(Mahalanobis, MatchesDenseInverse) {
  Rng rng = rng_for(10);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix P = oracle::random_spd(6, rng);
    const Vector x = standard_normal(6, rng);
    const double ref = x.dot(P.inverse() * x);
    EXPECT_NEAR(mahalanobis_sq(x, P), ref, 1e-10 * ref);
  }
}

TEST(Mahalanobis, RejectsIndefinite) {
  Matrix P = Matrix::Identity(2, 2);
  P(1, 1) = -1.0;
  EXPECT_THROW(mahalanobis_sq(Vector::Ones(2), P), NotPositiveDefinite);
}

TEST(DiagCovariance, FloorAppliesOnlyWhenInverting) {
  Vector th(3);
  th << 0.0, 2.0, 1e-12;
  const DiagCovariance D(th, 1e-8);
  EXPECT_EQ(D.theta()(0), 0.0);
  EXPECT_DOUBLE_EQ(D.floored()(0), 1e-8);
  EXPECT_DOUBLE_EQ(D.floored()(2), 1e-8);
  EXPECT_DOUBLE_EQ(D.inverse_diagonal()(1), 0.5);
  EXPECT_THROW(DiagCovariance(Vector::Constant(2, -1.0)), Error);
}

TEST(Covariance, DiagonalAndDenseAgree) {
  Vector th(3);
  th << 1.0, 4.0, 9.0;
  const Covariance a = DiagCovariance(th);
  const Covariance b(Matrix(th.asDiagonal()));
  Rng rng = rng_for(11);
  const Matrix M = oracle::random_matrix(3, 2, rng);
  EXPECT_LT((a.apply(M) - b.apply(M)).norm(), 1e-14);
  EXPECT_LT((a.sqrt_factor() * a.sqrt_factor().transpose() - a.dense()).norm(), 1e-12);
  EXPECT_LT((b.sqrt_factor() * b.sqrt_factor().transpose() - b.dense()).norm(), 1e-12);
}

TEST(NoiseModel, FactorAndNorm) {
  Rng rng = rng_for(12);
  const Matrix G = oracle::random_spd(4, rng);
  const NoiseModel noise(G);
  EXPECT_LT((noise.chol_factor() * noise.chol_factor().transpose() - G).norm(), 1e-10);
  const Vector r = standard_normal(4, rng);
  EXPECT_NEAR(noise.weighted_norm_sq(r), r.dot(G.inverse() * r), 1e-10);
  EXPECT_THROW(NoiseModel(-Matrix::Identity(2, 2)), NotPositiveDefinite);
}

TEST(InverseProblem, SupportAndValidation) {
  auto model = std::make_shared<const LinearForwardModel>(Matrix::Identity(3, 3));
  Vector truth(3);
  truth << 0.0, 1.0, 0.0;
  InverseProblem p{model, NoiseModel::isotropic(3, 1.0), Vector::Zero(3), truth, "t"};
  EXPECT_EQ(p.support(), std::vector<Index>{1});
  EXPECT_NO_THROW(p.validate());
  p.y = Vector::Zero(2);
  EXPECT_THROW(p.validate(), DimensionError);
}

TEST(ForwardModel, FiniteDifferenceJacobianOfNonlinearMap) {
  struct Square final : ForwardModel {
    Index input_dim() const override { return 2; }
    Index output_dim() const override { return 2; }
    Vector apply(const Vector& u) const override { return u.array().square(); }
  } sq;
  Vector u(2);
  u << 1.5, -2.0;
  const Matrix J = sq.jacobian(u);
  EXPECT_NEAR(J(0, 0), 3.0, 1e-6);
  EXPECT_NEAR(J(1, 1), -4.0, 1e-6);
  EXPECT_NEAR(J(0, 1), 0.0, 1e-8);
  const Matrix H = sq.component_hessian(u, 1);
  EXPECT_NEAR(H(1, 1), 2.0, 1e-4);
  EXPECT_NEAR(H(0, 0), 0.0, 1e-6);
}
