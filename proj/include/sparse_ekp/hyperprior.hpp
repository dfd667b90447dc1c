#pragma once

// Generalized-gamma hyperprior on the prior variances theta:
//
//   pi(theta_i) ~ theta_i^{r beta - 1} exp(-theta_i^r / vartheta_i)
//
// Joint objective over (u, theta):
//
//   J(u, theta) = 1/2 |y - G(u)|^2_Gamma + 1/2 |u|^2_{D_theta}
//                 - eta sum log(theta_i / vartheta_i) + sum theta_i^r / vartheta_i,
//   eta = r beta - 3/2.
//
// With eta = 0 and r > 0 the theta-minimizer is closed form and J restricted
// to it is the l_p objective with p = 2r / (r + 1).

#include "sparse_ekp/core.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace sparse_ekp {

class HyperParamError : public Error {
public:
  using Error::Error;
};

struct HyperParams {
  double r = 1.0;
  double beta = 1.5;
  Vector vartheta;

  double eta() const { return r * beta - 1.5; }

  /// r > 0 with beta = 3 / (2r), i.e. eta = 0.
  static HyperParams gengamma(double r, Vector vartheta) {
    return HyperParams{r, 1.5 / r, std::move(vartheta)};
  }
  static HyperParams gengamma(double r, Index d, double vartheta = 1.0) {
    return gengamma(r, Vector::Constant(d, vartheta));
  }
  /// Inverse-gamma hyperprior (r = -1).
  static HyperParams invgamma(double beta, Vector vartheta) {
    return HyperParams{-1.0, beta, std::move(vartheta)};
  }

  bool closed_form_gengamma() const {
    return r > 0.0 && std::abs(eta()) <= 1e-9 * std::max(1.0, std::abs(r * beta));
  }

  void validate(Index d) const {
    if (r == 0.0) throw HyperParamError("r must be nonzero");
    if (vartheta.size() != d) throw HyperParamError("vartheta has wrong length");
    for (Index i = 0; i < d; ++i)
      if (!(vartheta(i) > 0.0)) throw HyperParamError("vartheta entries must be positive");
  }
};

/// Effective l_p penalty C_r sum w_i |u_i|^p induced by (r, vartheta).
struct PenaltySpec {
  double p;
  double C_r;
  Vector weights;
  double theta_exponent;

  static PenaltySpec from(const HyperParams& hp) {
    if (!(hp.r > 0.0)) throw HyperParamError("l_p penalty needs r > 0");
    const double r = hp.r;
    PenaltySpec s;
    s.p = 2.0 * r / (r + 1.0);
    s.C_r = (r + 1.0) / std::pow(2.0 * r, r / (r + 1.0));
    s.weights = hp.vartheta.array().pow(-1.0 / (r + 1.0));
    s.theta_exponent = 2.0 / (r + 1.0);
    return s;
  }
};

inline double penalty_exponent(double r) { return 2.0 * r / (r + 1.0); }

/// theta_i = (vartheta_i / 2r)^{1/(r+1)} |u_i|^{2/(r+1)}. Exact zeros for u_i = 0.
inline Vector theta_update_gengamma(const Vector& u, const HyperParams& hp) {
  if (!hp.closed_form_gengamma())
    throw HyperParamError("closed-form theta update needs r > 0 and r*beta = 3/2");
  require_dims(hp.vartheta.size() == u.size(), "vartheta vs u");
  const double r = hp.r;
  const double a = 1.0 / (r + 1.0);
  Vector theta(u.size());
  for (Index i = 0; i < u.size(); ++i) {
    theta(i) = std::pow(hp.vartheta(i) / (2.0 * r), a) * std::pow(std::abs(u(i)), 2.0 * a);
  }
  return theta;
}

/// r = -1: theta_i = (u_i^2 / 2 + 1 / vartheta_i) / (beta + 3/2).
inline Vector theta_update_invgamma(const Vector& u, const HyperParams& hp) {
  if (hp.r != -1.0) throw HyperParamError("inverse-gamma update needs r = -1");
  if (!(hp.beta >= 0.0)) throw HyperParamError("inverse-gamma update needs beta >= 0");
  require_dims(hp.vartheta.size() == u.size(), "vartheta vs u");
  const double kappa = hp.beta + 1.5;
  return ((0.5 * u.array().square()) + hp.vartheta.array().inverse()) / kappa;
}

/// Dispatches on r: -1 selects the inverse-gamma rule, otherwise the
/// closed-form generalized-gamma rule.
inline Vector theta_update(const Vector& u, const HyperParams& hp) {
  return hp.r == -1.0 ? theta_update_invgamma(u, hp) : theta_update_gengamma(u, hp);
}

inline double data_misfit(const Vector& u, const InverseProblem& problem) {
  const Vector res = problem.y - problem.forward->apply(u);
  return 0.5 * problem.noise.weighted_norm_sq(res);
}

inline double objective_J(const Vector& u, const Vector& theta, const InverseProblem& problem,
                          const HyperParams& hp) {
  require_dims(theta.size() == u.size() && hp.vartheta.size() == u.size(), "J operand sizes");
  double prior = 0.0;
  double hyper = 0.0;
  double logs = 0.0;
  for (Index i = 0; i < u.size(); ++i) {
    if (!(theta(i) > 0.0)) throw HyperParamError("J needs strictly positive theta");
    prior += u(i) * u(i) / theta(i);
    logs += std::log(theta(i) / hp.vartheta(i));
    hyper += std::pow(theta(i), hp.r) / hp.vartheta(i);
  }
  return data_misfit(u, problem) + 0.5 * prior - hp.eta() * logs + hyper;
}

inline double lp_penalty(const Vector& u, const HyperParams& hp) {
  const PenaltySpec s = PenaltySpec::from(hp);
  double acc = 0.0;
  for (Index i = 0; i < u.size(); ++i) {
    if (u(i) != 0.0) acc += s.weights(i) * std::pow(std::abs(u(i)), s.p);
  }
  return s.C_r * acc;
}

inline double objective_Jp(const Vector& u, const InverseProblem& problem, const HyperParams& hp) {
  require_dims(hp.vartheta.size() == u.size(), "vartheta vs u");
  return data_misfit(u, problem) + lp_penalty(u, hp);
}

// ---------------------------------------------------------------------------
// Convexity
// ---------------------------------------------------------------------------

/// Per-component upper bound on theta_i / vartheta_i below which the theta
/// block of the Hessian is nonnegative. +inf means convex everywhere (given a
/// PSD forward-map curvature term).
struct ConvexityCertificate {
  bool guaranteed = false;
  Vector bound;

  bool holds(const Vector& theta, const Vector& vartheta) const {
    if (!guaranteed) return false;
    for (Index i = 0; i < theta.size(); ++i)
      if (theta(i) / vartheta(i) > bound(i)) return false;
    return true;
  }
};

/// For 0 < r < 1 the theta-block term r(r-1) theta^{r-2} / vartheta + eta / theta^2
/// is nonnegative iff theta / vartheta <= (eta / (r(1-r)))^{1/r} vartheta^{(1-r)/r}.
/// With vartheta = 1 this is (eta / (r(1-r)))^{1/r}.
inline ConvexityCertificate convexity_bound(const HyperParams& hp) {
  ConvexityCertificate c;
  const Index d = hp.vartheta.size();
  const double eta = hp.eta();
  if (eta < 0.0) {
    c.guaranteed = false;
    c.bound = Vector::Zero(d);
    return c;
  }
  c.guaranteed = true;
  const double r = hp.r;
  if (r >= 1.0 || r <= 0.0) {
    c.bound = Vector::Constant(d, std::numeric_limits<double>::infinity());
    return c;
  }
  const double base = std::pow(eta / (r * (1.0 - r)), 1.0 / r);
  c.bound = base * hp.vartheta.array().pow((1.0 - r) / r);
  return c;
}

/// q^T H q for q = (v, w), H the Hessian of J at (u, theta), in completed-square
/// form.
inline double hessian_quadform(const Vector& u, const Vector& theta, const Vector& v,
                               const Vector& w, const InverseProblem& problem,
                               const HyperParams& hp) {
  const Index d = u.size();
  require_dims(theta.size() == d && v.size() == d && w.size() == d && hp.vartheta.size() == d,
               "hessian_quadform operand sizes");
  const ForwardModel& model = *problem.forward;

  const Matrix J = model.jacobian(u);
  const Vector Jv = J * v;
  double q = problem.noise.weighted_norm_sq(Jv);

  if (!model.is_linear()) {
    const Vector weighted_res = problem.noise.solve(Vector(model.apply(u) - problem.y));
    for (Index i = 0; i < weighted_res.size(); ++i) {
      if (weighted_res(i) == 0.0) continue;
      q += weighted_res(i) * v.dot(model.component_hessian(u, i) * v);
    }
  }

  const double r = hp.r;
  const double eta = hp.eta();
  for (Index i = 0; i < d; ++i) {
    if (!(theta(i) > 0.0)) throw HyperParamError("hessian_quadform needs positive theta");
    const double dev = v(i) - u(i) * w(i) / theta(i);
    q += dev * dev / theta(i);
    const double curv =
        r * (r - 1.0) * std::pow(theta(i), r - 2.0) / hp.vartheta(i) + eta / (theta(i) * theta(i));
    q += curv * w(i) * w(i);
  }
  return q;
}

}  // namespace sparse_ekp
