#include "oracles.hpp"

#include "sparse_ekp/kalman.hpp"

#include <gtest/gtest.h>

using namespace sparse_ekp;

namespace {

struct LinearSetup {
  Matrix G;
  InverseProblem problem;
};

LinearSetup linear_setup(Index d, Index k, double noise_var, std::uint64_t seed) {
  Rng rng = make_rng({seed, Purpose::Generic, 0, 0, 0});
  Matrix G = oracle::random_matrix(k, d, rng);
  const Vector truth = standard_normal(d, rng);
  Vector y = G * truth + std::sqrt(noise_var) * standard_normal(k, rng);
  auto model = std::make_shared<const LinearForwardModel>(G);
  return {G, InverseProblem{model, NoiseModel::isotropic(k, noise_var), y, truth, "lin"}};
}

class ThrowingModel final : public ForwardModel {
public:
  Index input_dim() const override { return 3; }
  Index output_dim() const override { return 2; }
  Vector apply(const Vector&) const override { throw Error("boom"); }
};

class BlowUpModel final : public ForwardModel {
public:
  Index input_dim() const override { return 3; }
  Index output_dim() const override { return 2; }
  Vector apply(const Vector& u) const override {
    Vector out(2);
    out << std::exp(1e3 * u(0)), u(1);
    return out;
  }
};

}  // namespace

TEST(KalmanConfig, Validation) {
  KalmanConfig c;
  EXPECT_NO_THROW(c.validate());
  c.ensemble_size = 1;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.alpha = 0.0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.max_iterations = 0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.alpha = 1.5;
  EXPECT_FALSE(c.alpha_in_recommended_range());
}

TEST(Morozov, Examples) {
  const Vector y = Vector::LinSpaced(4, 0, 3);
  EXPECT_TRUE(morozov_check(y, y, Matrix::Identity(4, 4)));
  // |residual| = sqrt(k) exactly with Gamma = I_k: boundary is inclusive.
  EXPECT_TRUE(morozov_check(Vector::Ones(4), Vector::Zero(4), Matrix::Identity(4, 4)));
  EXPECT_FALSE(morozov_check(1.01 * Vector::Ones(4), Vector::Zero(4), Matrix::Identity(4, 4)));
  const Matrix gamma = 0.01 * Matrix::Identity(30, 30);
  EXPECT_NEAR(std::sqrt(gamma.trace()), 0.5477225575, 1e-9);
}

TEST(Iekf, OneStepLinearMatchesPosteriorForLargeN) {
  const auto s = linear_setup(10, 5, 0.1, 21);
  const Matrix P = Matrix::Identity(10, 10);
  const Vector exact = oracle::posterior_mean(s.G, s.problem.noise.gamma(), P, s.problem.y);
  KalmanConfig cfg;
  cfg.alpha = 1.0;
  cfg.max_iterations = 1;
  double err_small = 0.0, err_large = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    cfg.ensemble_size = 50;
    err_small += (iekf_run(s.problem, Covariance(P), cfg, {seed, 0}).final_mean - exact).norm() / exact.norm();
    cfg.ensemble_size = 2000;
    err_large += (iekf_run(s.problem, Covariance(P), cfg, {seed, 0}).final_mean - exact).norm() / exact.norm();
  }
  EXPECT_LT(err_large / 5, 0.1);
  EXPECT_LT(err_large, err_small);
}

TEST(Iekf, OneStepAlgebraicIdentityWithZeroedPerturbations) {
  const auto s = linear_setup(4, 3, 0.05, 22);
  KalmanConfig cfg;
  cfg.alpha = 1.0;
  cfg.max_iterations = 1;
  cfg.ensemble_size = 12;
  Matrix U0;
  InnerHooks hooks;
  hooks.zero_perturbations = true;
  hooks.on_step = [&](const StepInfo& info) { U0 = info.initial_members; };
  const Vector P = Vector::Constant(4, 2.0);
  const auto res = iekf_run(s.problem, Covariance::diagonal(P), cfg, {3, 0}, hooks);

  const Vector m0 = U0.rowwise().mean();
  Matrix C = Matrix::Zero(4, 4);
  for (Index n = 0; n < U0.cols(); ++n) C += (U0.col(n) - m0) * (U0.col(n) - m0).transpose();
  C /= static_cast<double>(U0.cols());
  const Matrix gamma = s.problem.noise.gamma();
  const Matrix K = C * s.G.transpose() * (s.G * C * s.G.transpose() + gamma).inverse();
  const Vector expected = m0 + K * (s.problem.y - s.G * m0);
  EXPECT_LT((res.final_mean - expected).norm(), 1e-8 * std::max(1.0, expected.norm()));
}

TEST(Iekf, ZeroResidualKeepsMeanNearZero) {
  Rng rng = make_rng({23, Purpose::Generic, 0, 0, 0});
  auto model = std::make_shared<const LinearForwardModel>(oracle::random_matrix(4, 6, rng));
  InverseProblem p{model, NoiseModel::isotropic(4, 1e-8), Vector::Zero(4), Vector::Zero(6), "zero"};
  KalmanConfig cfg;
  cfg.ensemble_size = 400;
  cfg.max_iterations = 5;
  const auto res = iekf_run(p, Covariance::diagonal(Vector::Ones(6)), cfg, {1, 0});
  EXPECT_LT(res.final_mean.norm(), 0.3);
}

TEST(Iekf, MembersStayInInitialAffineSpan) {
  const auto s = linear_setup(20, 8, 0.01, 24);
  KalmanConfig cfg;
  cfg.ensemble_size = 5;
  cfg.max_iterations = 10;
  double worst = 0.0;
  InnerHooks hooks;
  hooks.on_step = [&](const StepInfo& info) {
    const Matrix& U0 = info.initial_members;
    const Vector m0 = U0.rowwise().mean();
    const Matrix B = U0.colwise() - m0;
    for (Index n = 0; n < info.members.cols(); ++n)
      worst = std::max(worst, oracle::span_residual(B, m0, info.members.col(n)));
  };
  iekf_run(s.problem, Covariance::diagonal(Vector::Ones(20)), cfg, {5, 0}, hooks);
  EXPECT_LT(worst, 1e-8);
}

TEST(IekfSl, LeavesInitialSpan) {
  const auto s = linear_setup(20, 8, 0.01, 24);
  KalmanConfig cfg;
  cfg.ensemble_size = 5;
  cfg.max_iterations = 10;
  double worst = 0.0;
  InnerHooks hooks;
  hooks.on_step = [&](const StepInfo& info) {
    const Matrix& U0 = info.initial_members;
    const Vector m0 = U0.rowwise().mean();
    const Matrix B = U0.colwise() - m0;
    for (Index n = 0; n < info.members.cols(); ++n)
      worst = std::max(worst, oracle::span_residual(B, m0, info.members.col(n)));
  };
  iekfsl_run(s.problem, Covariance::diagonal(Vector::Ones(20)), cfg, {5, 0}, hooks);
  EXPECT_GT(worst, 1e-3);
}

TEST(Iekf, GainUsesFrozenInitialCovariance) {
  const auto s = linear_setup(6, 4, 0.05, 25);
  KalmanConfig cfg;
  cfg.ensemble_size = 30;
  cfg.max_iterations = 8;
  bool checked = false;
  Matrix P0_seen;
  InnerHooks hooks;
  hooks.on_step = [&](const StepInfo& info) {
    ASSERT_NE(info.initial_cov, nullptr);
    if (info.t == 0) P0_seen = *info.initial_cov;
    if (info.t == 5) {
      EXPECT_EQ((*info.initial_cov - P0_seen).norm(), 0.0);
      const Matrix& GN = info.GN;
      const Matrix& P0 = *info.initial_cov;
      const Matrix K = P0 * GN.transpose() * (GN * P0 * GN.transpose() + s.problem.noise.gamma()).inverse();
      EXPECT_LT((K - info.gain).norm(), 1e-8 * std::max(1.0, K.norm()));
      checked = true;
    }
  };
  iekf_run(s.problem, Covariance::diagonal(Vector::Ones(6)), cfg, {6, 0}, hooks);
  EXPECT_TRUE(checked);
}

TEST(IekfSl, GainUsesPriorCovariance) {
  const auto s = linear_setup(6, 4, 0.05, 26);
  KalmanConfig cfg;
  cfg.ensemble_size = 30;
  cfg.max_iterations = 3;
  Vector th(6);
  th << 0.5, 1, 2, 0.1, 3, 1;
  InnerHooks hooks;
  hooks.on_step = [&](const StepInfo& info) {
    EXPECT_EQ(info.initial_cov, nullptr);
    const Matrix P = th.asDiagonal();
    const Matrix K = P * info.GN.transpose() *
                     (info.GN * P * info.GN.transpose() + s.problem.noise.gamma()).inverse();
    EXPECT_LT((K - info.gain).norm(), 1e-8 * std::max(1.0, K.norm()));
  };
  iekfsl_run(s.problem, Covariance::diagonal(th), cfg, {7, 0}, hooks);
}

TEST(IekfSl, ZeroMapStationaryMeanIsZero) {
  auto model = std::make_shared<const LinearForwardModel>(Matrix::Zero(2, 3));
  InverseProblem p{model, NoiseModel::isotropic(2, 1.0), Vector::Zero(2), std::nullopt, "zero"};
  KalmanConfig cfg;
  cfg.ensemble_size = 2000;
  cfg.alpha = 0.5;
  cfg.max_iterations = 40;
  const auto res = iekfsl_run(p, Covariance::diagonal(Vector::Ones(3)), cfg, {8, 0});
  // Stationary variance is 1 per component; CLT bound on the mean.
  EXPECT_LT(res.final_mean.cwiseAbs().maxCoeff(), 5.0 / std::sqrt(2000.0));
}

TEST(IekfSl, ApproachesPosteriorMoments) {
  const auto s = linear_setup(5, 3, 0.5, 27);
  const Matrix P = Matrix::Identity(5, 5);
  const Vector mean = oracle::posterior_mean(s.G, s.problem.noise.gamma(), P, s.problem.y);
  const Matrix cov = oracle::posterior_cov(s.G, s.problem.noise.gamma(), P);
  KalmanConfig cfg;
  cfg.ensemble_size = 1000;
  cfg.alpha = 0.1;
  cfg.max_iterations = 200;
  const auto res = iekfsl_run(s.problem, Covariance(P), cfg, {9, 0});
  const Matrix U = res.final_ensemble.members();
  const Vector m = U.rowwise().mean();
  const Matrix C = (U.colwise() - m) * (U.colwise() - m).transpose() / static_cast<double>(U.cols());
  EXPECT_LT((m - mean).norm() / mean.norm(), 0.2);
  EXPECT_LT((C - cov).norm() / cov.norm(), 0.35);
}

TEST(Inner, ResultInvariants) {
  const auto s = linear_setup(8, 5, 0.05, 28);
  KalmanConfig cfg;
  cfg.ensemble_size = 20;
  cfg.max_iterations = 6;
  for (auto v : {InnerVariant::Iekf, InnerVariant::IekfSl}) {
    const auto res = inner_run(v, s.problem, Covariance::diagonal(Vector::Ones(8)), cfg, {10, 0});
    EXPECT_EQ(res.iterations_used, 6);
    ASSERT_EQ(res.misfit_trace.size(), 7u);
    for (double m : res.misfit_trace) EXPECT_TRUE(std::isfinite(m));
    EXPECT_LT((res.final_mean - res.final_ensemble.mean()).norm(), 1e-12);
  }
}

TEST(Inner, BitIdenticalAcrossThreadCounts) {
  const auto s = linear_setup(12, 6, 0.05, 29);
  KalmanConfig cfg;
  cfg.ensemble_size = 40;
  cfg.max_iterations = 5;
  for (auto v : {InnerVariant::Iekf, InnerVariant::IekfSl}) {
    cfg.threads = 1;
    const auto a = inner_run(v, s.problem, Covariance::diagonal(Vector::Ones(12)), cfg, {11, 2});
    cfg.threads = 4;
    const auto b = inner_run(v, s.problem, Covariance::diagonal(Vector::Ones(12)), cfg, {11, 2});
    EXPECT_EQ(a.final_ensemble.members(), b.final_ensemble.members());
    EXPECT_EQ(a.misfit_trace, b.misfit_trace);
  }
}

TEST(Inner, MorozovStopsEarly) {
  const auto s = linear_setup(4, 8, 0.01, 30);
  KalmanConfig cfg;
  cfg.ensemble_size = 50;
  cfg.max_iterations = 50;
  cfg.stopping = StoppingRule::Morozov;
  const auto res = iekf_run(s.problem, Covariance::diagonal(Vector::Constant(4, 10.0)), cfg, {12, 0});
  EXPECT_LT(res.iterations_used, 50);
  EXPECT_LE(res.misfit_trace.back(), std::sqrt(s.problem.noise.gamma().trace()));
}

TEST(Inner, ForwardFailureReportsMember) {
  InverseProblem p{std::make_shared<const ThrowingModel>(), NoiseModel::isotropic(2, 1.0), Vector::Zero(2),
                   std::nullopt, "throw"};
  KalmanConfig cfg;
  cfg.ensemble_size = 4;
  cfg.threads = 1;
  try {
    iekf_run(p, Covariance::diagonal(Vector::Ones(3)), cfg, {1, 0});
    FAIL() << "expected ForwardEvaluationError";
  } catch (const ForwardEvaluationError& e) {
    EXPECT_EQ(e.member(), 0);
  }
}

TEST(Inner, NonFiniteOutputsRaiseDivergence) {
  InverseProblem p{std::make_shared<const BlowUpModel>(), NoiseModel::isotropic(2, 1.0), Vector::Zero(2),
                   std::nullopt, "blowup"};
  KalmanConfig cfg;
  cfg.ensemble_size = 10;
  EXPECT_THROW(iekf_run(p, Covariance::diagonal(Vector::Ones(3)), cfg, {1, 0}), DivergenceError);
}

TEST(KalmanGain, FallbackWhenInnovationSwampsNoise) {
  // GN P GN^T ~ 1e32 makes the Cholesky of S fail in floating point.
  Matrix GN(2, 2);
  GN << 1e16, 1e16, 1e16, 1e16;
  const Matrix pg = Matrix::Identity(2, 2) * GN.transpose();
  const Matrix K = detail::kalman_gain(pg, GN, 1e-2 * Matrix::Identity(2, 2));
  EXPECT_TRUE(K.allFinite());
}
