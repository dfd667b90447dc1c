#pragma once

// Outer alternating loop: inner Kalman solve for u with prior D_theta, then
// closed-form theta update. Also credible intervals, error metrics, and the
// exact alternating minimizer for linear forward maps.

#include "sparse_ekp/core.hpp"
#include "sparse_ekp/hyperprior.hpp"
#include "sparse_ekp/kalman.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

namespace sparse_ekp {

struct OuterConfig {
  KalmanConfig inner;
  HyperParams hp;
  Vector theta0;
  int max_outer = 1;  // number of inner solves, including the vanilla one
  std::optional<double> rel_tol;
  InnerVariant variant = InnerVariant::Iekf;
  bool record_ensembles = false;
  double theta_floor = kDefaultThetaFloor;

  void validate(Index d) const {
    inner.validate();
    hp.validate(d);
    if (hp.r != -1.0 && !hp.closed_form_gengamma())
      throw HyperParamError("theta update needs r*beta = 3/2 with r > 0, or r = -1");
    if (max_outer < 1) throw Error("max_outer must be at least 1");
    if (rel_tol && !(*rel_tol > 0.0)) throw Error("relative-change tolerance must be positive");
    require_dims(theta0.size() == d, "theta0 vs problem dimension");
    for (Index i = 0; i < d; ++i)
      if (!(theta0(i) > 0.0)) throw Error("theta0 entries must be positive");
    if (!(theta_floor > 0.0)) throw Error("theta floor must be positive");
  }
};

struct Metrics {
  std::optional<double> l2_error;
  double avg_width = 0.0;
  std::optional<double> off_support_norm;
};

struct IterationRecord {
  int outer = 0;
  Vector estimate;
  Vector theta;  // prior variances used for this inner solve
  Vector lower;
  Vector upper;
  Metrics metrics;
  double misfit = 0.0;  // |y - G(estimate)|
  int inner_iterations = 0;
  std::optional<Matrix> ensemble;
};

struct RunRecord {
  std::uint64_t seed = 0;
  std::vector<IterationRecord> iterations;
  bool diverged = false;
  bool stopped_by_tolerance = false;
  std::string message;
};

// ---------------------------------------------------------------------------

/// |u_new - u_old|_inf / |u_old|_inf < tau. A zero u_old never stops.
inline bool relative_change_stop(const Vector& u_new, const Vector& u_old, double tau) {
  require_dims(u_new.size() == u_old.size(), "relative change operands");
  const double denom = u_old.lpNorm<Eigen::Infinity>();
  if (denom == 0.0) return false;
  return (u_new - u_old).lpNorm<Eigen::Infinity>() / denom < tau;
}

/// Percentile of sorted samples with linear interpolation, h = (n - 1) q.
inline double percentile_sorted(const std::vector<double>& sorted, double q) {
  const std::size_t n = sorted.size();
  if (n == 0) throw Error("percentile of empty sample");
  const double h = (static_cast<double>(n) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= n) return sorted.back();
  const double frac = h - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

struct CredibleIntervals {
  Vector lower;
  Vector upper;
};

/// Componentwise empirical percentiles of the ensemble (members as columns).
inline CredibleIntervals credible_intervals(const Matrix& members, double lo_pct = 2.5,
                                            double hi_pct = 97.5) {
  require_dims(members.cols() >= 2, "credible intervals need N >= 2");
  if (!(lo_pct >= 0.0 && lo_pct <= hi_pct && hi_pct <= 100.0)) throw Error("invalid percentiles");
  CredibleIntervals ci{Vector(members.rows()), Vector(members.rows())};
  std::vector<double> row(static_cast<std::size_t>(members.cols()));
  for (Index i = 0; i < members.rows(); ++i) {
    for (Index n = 0; n < members.cols(); ++n) row[static_cast<std::size_t>(n)] = members(i, n);
    std::sort(row.begin(), row.end());
    ci.lower(i) = percentile_sorted(row, lo_pct / 100.0);
    ci.upper(i) = percentile_sorted(row, hi_pct / 100.0);
  }
  return ci;
}

inline CredibleIntervals credible_intervals(const Ensemble& e, double lo_pct = 2.5,
                                            double hi_pct = 97.5) {
  return credible_intervals(e.members(), lo_pct, hi_pct);
}

inline Metrics metrics(const Vector& u_hat, const std::optional<Vector>& truth,
                       const std::vector<Index>& support, const Vector& lower, const Vector& upper) {
  require_dims(lower.size() == u_hat.size() && upper.size() == u_hat.size(), "interval bounds");
  Metrics m;
  m.avg_width = u_hat.size() == 0 ? 0.0 : (upper - lower).sum() / static_cast<double>(u_hat.size());
  if (truth) {
    require_dims(truth->size() == u_hat.size(), "truth vs estimate");
    m.l2_error = (u_hat - *truth).norm();
    std::vector<bool> on(static_cast<std::size_t>(u_hat.size()), false);
    for (Index s : support) on[static_cast<std::size_t>(s)] = true;
    double acc = 0.0;
    for (Index i = 0; i < u_hat.size(); ++i)
      if (!on[static_cast<std::size_t>(i)]) acc += u_hat(i) * u_hat(i);
    m.off_support_norm = std::sqrt(acc);
  }
  return m;
}

// ---------------------------------------------------------------------------

inline RunRecord run_outer(const InverseProblem& problem, const OuterConfig& cfg, std::uint64_t seed) {
  problem.validate();
  cfg.validate(problem.input_dim());
  const auto support = problem.support();

  RunRecord record;
  record.seed = seed;
  Vector theta = cfg.theta0;

  for (int l = 0; l < cfg.max_outer; ++l) {
    const DiagCovariance prior(theta, cfg.theta_floor);
    std::optional<InnerRunResult> inner;
    try {
      inner = inner_run(cfg.variant, problem, Covariance(prior), cfg.inner,
                        SeedContext{seed, static_cast<std::uint64_t>(l)});
    } catch (const DivergenceError& e) {
      record.diverged = true;
      record.message = "outer iteration " + std::to_string(l) + ": " + e.what();
      break;
    } catch (const ForwardEvaluationError& e) {
      record.diverged = true;
      record.message = "outer iteration " + std::to_string(l) + ": " + e.what();
      break;
    }

    IterationRecord it;
    it.outer = l;
    it.estimate = inner->final_mean;
    it.theta = theta;
    const CredibleIntervals ci = credible_intervals(inner->final_ensemble);
    it.lower = ci.lower;
    it.upper = ci.upper;
    it.metrics = metrics(it.estimate, problem.truth, support, it.lower, it.upper);
    it.misfit = (problem.y - problem.forward->apply(it.estimate)).norm();
    it.inner_iterations = inner->iterations_used;
    if (cfg.record_ensembles) it.ensemble = inner->final_ensemble.members();

    if (!std::isfinite(it.misfit)) {
      record.diverged = true;
      record.message = "outer iteration " + std::to_string(l) + ": non-finite misfit";
      break;
    }
    const bool stop = cfg.rel_tol && !record.iterations.empty() &&
                      relative_change_stop(it.estimate, record.iterations.back().estimate, *cfg.rel_tol);
    record.iterations.push_back(std::move(it));
    if (stop) {
      record.stopped_by_tolerance = true;
      break;
    }
    theta = theta_update(record.iterations.back().estimate, cfg.hp);
  }
  return record;
}

/// "l0.5-IEKF-SL" style label; max_outer == 1 gives the vanilla method.
inline std::string method_label(InnerVariant variant, const HyperParams& hp, int max_outer) {
  const std::string base = variant == InnerVariant::Iekf ? "IEKF" : "IEKF-SL";
  if (max_outer <= 1) return base;
  if (hp.r == -1.0) return "invgamma-" + base;
  char buf[32];
  std::snprintf(buf, sizeof buf, "l%.3g-", penalty_exponent(hp.r));
  return buf + base;
}

// ---------------------------------------------------------------------------

struct AlternationStep {
  Vector u;
  Vector theta;
};

/// Exact block-coordinate minimization of J for G(u) = A u:
///   u <- (A^T Gamma^-1 A + D_theta^-1)^-1 A^T Gamma^-1 y   (floored theta)
///   theta <- theta_update(u)
/// Entry 0 is (u = 0, theta0).
inline std::vector<AlternationStep> linear_exact_alternation(const Matrix& A, const NoiseModel& noise,
                                                             const Vector& y, const HyperParams& hp,
                                                             const Vector& theta0, int iterations,
                                                             double theta_floor = kDefaultThetaFloor) {
  require_dims(A.rows() == y.size() && noise.dim() == y.size() && theta0.size() == A.cols(),
               "linear alternation operands");
  const Matrix GtGi = A.transpose() * noise.solve(A);
  const Vector GtGiy = A.transpose() * noise.solve(y);

  std::vector<AlternationStep> traj;
  traj.push_back({Vector::Zero(A.cols()), theta0});
  for (int l = 0; l < iterations; ++l) {
    const DiagCovariance D(traj.back().theta, theta_floor);
    Matrix normal = GtGi;
    normal.diagonal() += D.inverse_diagonal();
    Eigen::LLT<Matrix> llt(normal);
    if (llt.info() != Eigen::Success) throw NotPositiveDefinite("normal matrix is singular");
    Vector u = llt.solve(GtGiy);
    Vector theta = theta_update(u, hp);
    traj.push_back({std::move(u), std::move(theta)});
  }
  return traj;
}

inline std::vector<AlternationStep> linear_exact_alternation(const InverseProblem& problem,
                                                             const HyperParams& hp,
                                                             const Vector& theta0, int iterations,
                                                             double theta_floor = kDefaultThetaFloor) {
  const auto* lin = dynamic_cast<const LinearForwardModel*>(problem.forward.get());
  if (!lin) throw Error("linear_exact_alternation needs a LinearForwardModel");
  return linear_exact_alternation(lin->matrix(), problem.noise, problem.y, hp, theta0, iterations,
                                  theta_floor);
}

}  // namespace sparse_ekp
