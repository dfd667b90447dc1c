#pragma once

// Inner solvers: the iterative ensemble Kalman filter (IEKF) and its variant
// with statistical linearization (IEKF-SL). Both approximately minimize
//
//   1/2 |y - G(u)|^2_Gamma + 1/2 |u|^2_P
//
// and return the final ensemble mean.

#include "sparse_ekp/core.hpp"
#include "sparse_ekp/parallel.hpp"
#include "sparse_ekp/random.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace sparse_ekp {

enum class InnerVariant { Iekf, IekfSl };

inline std::string to_string(InnerVariant v) { return v == InnerVariant::Iekf ? "iekf" : "iekf-sl"; }

enum class StoppingRule { FixedIterations, Morozov };

struct KalmanConfig {
  Index ensemble_size = 100;
  double alpha = 0.5;
  int max_iterations = 20;
  StoppingRule stopping = StoppingRule::FixedIterations;
  double pinv_tol = kDefaultPinvTol;
  unsigned threads = 0;  // 0: use thread_budget()

  void validate() const {
    if (ensemble_size < 2) throw Error("ensemble size must be at least 2");
    if (!(alpha > 0.0)) throw Error("step size alpha must be positive");
    if (max_iterations < 1) throw Error("number of inner iterations must be at least 1");
    if (!(pinv_tol > 0.0)) throw Error("pseudoinverse tolerance must be positive");
  }
  bool alpha_in_recommended_range() const { return alpha > 0.0 && alpha <= 1.0; }
};

/// Which draws to use; `outer` separates the inner runs of one outer loop.
struct SeedContext {
  std::uint64_t seed = 0;
  std::uint64_t outer = 0;
};

/// Snapshot handed to InnerHooks::on_step before each member update.
struct StepInfo {
  int t;
  const Matrix& members;          // u_t, d x N
  const Matrix& outputs;          // G(u_t), k x N
  const Matrix& initial_members;  // u_0, d x N
  const Matrix& GN;               // k x d
  const Matrix& gain;             // d x k
  const Matrix* initial_cov;      // P0uu for IEKF, nullptr for IEKF-SL
};

/// Test instrumentation. Production callers leave this default-constructed.
struct InnerHooks {
  bool zero_perturbations = false;
  std::function<void(const StepInfo&)> on_step;
};

struct InnerRunResult {
  Vector final_mean;
  Ensemble final_ensemble;
  int iterations_used = 0;
  std::vector<double> misfit_trace;  // |y - G(m_t)|, t = 0 .. iterations_used
};

class ForwardEvaluationError : public Error {
public:
  ForwardEvaluationError(Index member, const std::string& what)
      : Error("forward map failed for ensemble member " + std::to_string(member) + ": " + what),
        member_(member) {}
  Index member() const { return member_; }

private:
  Index member_;
};

class DivergenceError : public Error {
public:
  using Error::Error;
};

/// |y - G(m)| <= sqrt(trace(Gamma)).
inline bool morozov_check(const Vector& y, const Vector& g_of_mean, const Matrix& gamma) {
  require_dims(y.size() == g_of_mean.size() && gamma.rows() == y.size(), "morozov operands");
  return (y - g_of_mean).norm() <= std::sqrt(gamma.trace());
}

namespace detail {

inline Matrix evaluate_members(const ForwardModel& model, const Matrix& members, unsigned threads) {
  Matrix out(model.output_dim(), members.cols());
  const unsigned workers = model.concurrent_safe() ? threads : 1u;
  parallel_for(members.cols(), workers, [&](long n) {
    Vector g;
    try {
      g = model.apply(members.col(n));
    } catch (const std::exception& e) {
      throw ForwardEvaluationError(n, e.what());
    }
    if (g.size() != out.rows()) throw ForwardEvaluationError(n, "wrong output length");
    out.col(n) = g;
  });
  return out;
}

/// K = P GN^T (GN P GN^T + Gamma)^{-1}, with P GN^T supplied as `pg`.
/// Cholesky first; when GN P GN^T swamps Gamma in floating point the solve
/// falls back to an eigendecomposition with eigenvalues clamped at
/// lambda_min(Gamma), the exact lower bound of the innovation spectrum.
inline Matrix kalman_gain(const Matrix& pg, const Matrix& GN, const Matrix& gamma) {
  Matrix S = GN * pg + gamma;
  S = 0.5 * (S + S.transpose());
  Eigen::LLT<Matrix> llt(S);
  if (llt.info() == Eigen::Success) return llt.solve(pg.transpose()).transpose();

  Eigen::SelfAdjointEigenSolver<Matrix> gamma_eig(gamma, Eigen::EigenvaluesOnly);
  const double floor = gamma_eig.eigenvalues().minCoeff();
  if (!(floor > 0.0)) throw NotPositiveDefinite("observation noise covariance is not SPD");
  Eigen::SelfAdjointEigenSolver<Matrix> eig(S);
  if (eig.info() != Eigen::Success) throw NotPositiveDefinite("innovation matrix eigensolve failed");
  const Vector inv = eig.eigenvalues().cwiseMax(floor).cwiseInverse();
  const Matrix& V = eig.eigenvectors();
  return pg * (V * inv.asDiagonal() * V.transpose());
}

inline double mean_misfit(const ForwardModel& model, const Vector& y, const Vector& mean) {
  Vector g;
  try {
    g = model.apply(mean);
  } catch (const std::exception& e) {
    throw DivergenceError(std::string("forward map failed at the ensemble mean: ") + e.what());
  }
  return (y - g).norm();
}

inline Matrix draw_columns(const GaussianSampler& sampler, Index count, double scale,
                           StreamKey key, unsigned threads) {
  Matrix out(sampler.dim(), count);
  parallel_for(count, threads, [&](long n) {
    StreamKey k = key;
    k.member = static_cast<std::uint64_t>(n);
    Rng rng = make_rng(k);
    out.col(n) = sampler.draw_scaled(rng, scale);
  });
  return out;
}

inline void check_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw DivergenceError(std::string("non-finite ") + what);
}

inline InnerRunResult run_inner(InnerVariant variant, const InverseProblem& problem,
                                const Covariance& prior, const KalmanConfig& cfg, SeedContext ctx,
                                const InnerHooks& hooks) {
  cfg.validate();
  problem.validate();
  const ForwardModel& model = *problem.forward;
  const Index d = model.input_dim();
  const Index N = cfg.ensemble_size;
  require_dims(prior.dim() == d, "prior covariance vs forward input");
  const unsigned threads = cfg.threads == 0 ? thread_budget() : cfg.threads;
  const Matrix& gamma = problem.noise.gamma();
  const double alpha = cfg.alpha;

  const GaussianSampler prior_sampler(Vector::Zero(d), prior);
  const GaussianSampler data_sampler =
      GaussianSampler::from_factor(problem.y, problem.noise.chol_factor());

  const Matrix U0 = draw_columns(prior_sampler, N, 1.0,
                                 {ctx.seed, Purpose::InitialEnsemble, ctx.outer, 0, 0}, threads);
  Matrix U = U0;
  Matrix GU = evaluate_members(model, U, threads);

  Matrix P0uu;
  if (variant == InnerVariant::Iekf) P0uu = ensemble_stats(U0, GU).Puu;

  // Prior-side gain factor P GN^T is formed per step; for IEKF the frozen
  // initial covariance P0uu plays the role of P.
  const double data_scale = variant == InnerVariant::Iekf ? 1.0 / alpha : 2.0 / alpha;
  const double prior_scale = 2.0 / alpha;

  std::vector<double> trace;
  trace.reserve(static_cast<std::size_t>(cfg.max_iterations) + 1);
  const double threshold = std::sqrt(gamma.trace());

  int t = 0;
  for (;; ++t) {
    const double misfit = mean_misfit(model, problem.y, U.rowwise().mean());
    trace.push_back(misfit);
    if (!std::isfinite(misfit)) throw DivergenceError("non-finite data misfit at inner step " + std::to_string(t));
    if (t == cfg.max_iterations) break;
    if (cfg.stopping == StoppingRule::Morozov && misfit <= threshold) break;

    const EnsembleStats stats = ensemble_stats(U, GU);
    const Matrix GN = statistical_linearization(stats.Puy, stats.Puu, cfg.pinv_tol);
    const Matrix pg = variant == InnerVariant::Iekf ? Matrix(P0uu * GN.transpose())
                                                    : prior.apply(GN.transpose());
    const Matrix K = kalman_gain(pg, GN, gamma);

    if (hooks.on_step) {
      hooks.on_step(StepInfo{t, U, GU, U0, GN, K,
                             variant == InnerVariant::Iekf ? &P0uu : nullptr});
    }

    Matrix Yp;
    if (hooks.zero_perturbations) {
      Yp = problem.y.replicate(1, N);
    } else {
      Yp = draw_columns(data_sampler, N, data_scale,
                        {ctx.seed, Purpose::DataPerturbation, ctx.outer,
                         static_cast<std::uint64_t>(t), 0},
                        threads);
    }

    Matrix anchor;  // u_0 for IEKF, perturbed prior mean for IEKF-SL
    if (variant == InnerVariant::Iekf) {
      anchor = U0;
    } else if (hooks.zero_perturbations) {
      anchor = Matrix::Zero(d, N);
    } else {
      anchor = draw_columns(prior_sampler, N, prior_scale,
                            {ctx.seed, Purpose::PriorPerturbation, ctx.outer,
                             static_cast<std::uint64_t>(t), 0},
                            threads);
    }

    const Matrix D = anchor - U;
    U += alpha * (K * (Yp - GU) + D - K * (GN * D));
    check_finite(U, "ensemble member after update");
    GU = evaluate_members(model, U, threads);
    check_finite(GU, "forward evaluation");
  }

  InnerRunResult result{U.rowwise().mean(), Ensemble(U), t, std::move(trace)};
  return result;
}

}  // namespace detail

/// IEKF: gain built from the frozen initial-ensemble covariance; members are
/// pulled back toward their own initial draws.
inline InnerRunResult iekf_run(const InverseProblem& problem, const Covariance& prior,
                               const KalmanConfig& cfg, SeedContext ctx,
                               const InnerHooks& hooks = {}) {
  return detail::run_inner(InnerVariant::Iekf, problem, prior, cfg, ctx, hooks);
}

/// IEKF-SL: gain built from the prior covariance; both data and prior mean are
/// perturbed with doubled variance each step.
inline InnerRunResult iekfsl_run(const InverseProblem& problem, const Covariance& prior,
                                 const KalmanConfig& cfg, SeedContext ctx,
                                 const InnerHooks& hooks = {}) {
  return detail::run_inner(InnerVariant::IekfSl, problem, prior, cfg, ctx, hooks);
}

inline InnerRunResult inner_run(InnerVariant variant, const InverseProblem& problem,
                                const Covariance& prior, const KalmanConfig& cfg, SeedContext ctx,
                                const InnerHooks& hooks = {}) {
  return detail::run_inner(variant, problem, prior, cfg, ctx, hooks);
}

}  // namespace sparse_ekp
