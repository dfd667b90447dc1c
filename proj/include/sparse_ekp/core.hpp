#pragma once

// Ensemble container, empirical statistics, statistical linearization and the
// shared linear-algebra helpers used by the Kalman solvers.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace sparse_ekp {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
  using Error::Error;
};

class NotPositiveDefinite : public Error {
public:
  using Error::Error;
};

inline void require_dims(bool ok, const std::string& what) {
  if (!ok) throw DimensionError("dimension mismatch: " + what);
}

// ---------------------------------------------------------------------------
// Ensemble
// ---------------------------------------------------------------------------

/// N particles in R^d, stored column-wise (d x N).
class Ensemble {
public:
  explicit Ensemble(Matrix members) : members_(std::move(members)) {
    if (members_.cols() < 2) throw DimensionError("ensemble needs N >= 2 members");
  }

  Index dim() const { return members_.rows(); }
  Index size() const { return members_.cols(); }

  const Matrix& members() const { return members_; }
  auto member(Index n) const { return members_.col(n); }

  Vector mean() const { return members_.rowwise().mean(); }

private:
  Matrix members_;
};

struct EnsembleStats {
  Vector m;    // mean of members
  Vector g;    // mean of forward evaluations
  Matrix Puu;  // d x d
  Matrix Puy;  // d x k
  Matrix Pyy;  // k x k
};

/// Empirical moments with the 1/N normalization. `outputs` holds the forward
/// image of each member column-wise (k x N).
inline EnsembleStats ensemble_stats(const Matrix& members, const Matrix& outputs) {
  require_dims(members.cols() == outputs.cols(), "members and outputs differ in count");
  require_dims(members.cols() >= 2, "ensemble needs N >= 2 members");
  const double inv_n = 1.0 / static_cast<double>(members.cols());

  EnsembleStats s;
  s.m = members.rowwise().mean();
  s.g = outputs.rowwise().mean();
  const Matrix du = members.colwise() - s.m;
  const Matrix dy = outputs.colwise() - s.g;
  s.Puu = inv_n * du * du.transpose();
  s.Puy = inv_n * du * dy.transpose();
  s.Pyy = inv_n * dy * dy.transpose();
  return s;
}

inline EnsembleStats ensemble_stats(const Ensemble& e, const Matrix& outputs) {
  return ensemble_stats(e.members(), outputs);
}

inline EnsembleStats ensemble_stats(const Ensemble& e, const std::vector<Vector>& outputs) {
  require_dims(static_cast<Index>(outputs.size()) == e.size(), "one output per member");
  Matrix out(outputs.empty() ? 0 : outputs.front().size(), e.size());
  for (Index n = 0; n < e.size(); ++n) {
    require_dims(outputs[n].size() == out.rows(), "outputs have inconsistent length");
    out.col(n) = outputs[n];
  }
  return ensemble_stats(e.members(), out);
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline constexpr double kDefaultPinvTol = 1e-10;

/// Moore-Penrose pseudoinverse of a symmetric PSD matrix. Eigenvalues at or
/// below tol * lambda_max are treated as zero.
inline Matrix pseudoinverse(const Matrix& P, double tol = kDefaultPinvTol) {
  require_dims(P.rows() == P.cols(), "pseudoinverse needs a square matrix");
  if (P.size() == 0) return P;
  const Matrix sym = 0.5 * (P + P.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym);
  const Vector& lambda = eig.eigenvalues();
  const double lmax = lambda.cwiseAbs().maxCoeff();
  if (lmax == 0.0) return Matrix::Zero(P.rows(), P.cols());
  const double cut = tol * lmax;
  Vector inv = Vector::Zero(lambda.size());
  for (Index i = 0; i < lambda.size(); ++i) {
    if (lambda(i) > cut) inv(i) = 1.0 / lambda(i);
  }
  const Matrix& V = eig.eigenvectors();
  return V * inv.asDiagonal() * V.transpose();
}

/// Surrogate Jacobian GN = Puy^T * pinv(Puu) (k x d).
inline Matrix statistical_linearization(const Matrix& Puy, const Matrix& Puu,
                                        double tol = kDefaultPinvTol) {
  require_dims(Puu.rows() == Puu.cols() && Puy.rows() == Puu.rows(),
               "Puy must be d x k and Puu d x d");
  return Puy.transpose() * pseudoinverse(Puu, tol);
}

/// x^T P^{-1} x through a Cholesky solve.
inline double mahalanobis_sq(const Vector& x, const Matrix& P) {
  require_dims(P.rows() == P.cols() && P.rows() == x.size(), "mahalanobis operand sizes");
  Eigen::LLT<Matrix> llt(P);
  if (llt.info() != Eigen::Success) throw NotPositiveDefinite("mahalanobis_sq: matrix is not SPD");
  const Vector z = llt.matrixL().solve(x);
  return z.squaredNorm();
}

/// Symmetric square root factor L with L L^T = cov, via eigendecomposition.
/// Tolerates rank deficiency; rejects clearly negative eigenvalues.
inline Matrix psd_sqrt(const Matrix& cov) {
  require_dims(cov.rows() == cov.cols(), "covariance must be square");
  if (cov.size() == 0) return cov;
  const Matrix sym = 0.5 * (cov + cov.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym);
  const Vector& lambda = eig.eigenvalues();
  const double lmax = std::max(lambda.cwiseAbs().maxCoeff(), 0.0);
  Vector root(lambda.size());
  for (Index i = 0; i < lambda.size(); ++i) {
    if (lambda(i) < -1e-10 * std::max(lmax, 1.0))
      throw NotPositiveDefinite("covariance has a negative eigenvalue");
    root(i) = std::sqrt(std::max(lambda(i), 0.0));
  }
  const Matrix& V = eig.eigenvectors();
  return V * root.asDiagonal() * V.transpose();
}

// ---------------------------------------------------------------------------
// Covariances
// ---------------------------------------------------------------------------

inline constexpr double kDefaultThetaFloor = 1e-8;

/// D_theta = diag(theta). Zeros are kept; `floored()` is what gets inverted
/// or sampled from.
class DiagCovariance {
public:
  explicit DiagCovariance(Vector theta, double floor = kDefaultThetaFloor)
      : theta_(std::move(theta)), floor_(floor) {
    if (!(floor_ > 0.0)) throw Error("theta floor must be positive");
    for (Index i = 0; i < theta_.size(); ++i) {
      if (!(theta_(i) >= 0.0)) throw Error("theta entries must be non-negative");
    }
  }

  const Vector& theta() const { return theta_; }
  double floor() const { return floor_; }
  Index dim() const { return theta_.size(); }

  Vector floored() const { return theta_.cwiseMax(floor_); }
  Vector inverse_diagonal() const { return floored().cwiseInverse(); }
  Matrix dense() const { return floored().asDiagonal(); }

private:
  Vector theta_;
  double floor_;
};

/// Prior covariance handed to the inner solvers: either diagonal or dense.
class Covariance {
public:
  Covariance(const DiagCovariance& diag) : rep_(diag.floored()) {}  // NOLINT(google-explicit-constructor)
  explicit Covariance(Matrix dense) : rep_(std::move(dense)) {
    const Matrix& P = std::get<Matrix>(rep_);
    require_dims(P.rows() == P.cols(), "covariance must be square");
  }

  static Covariance diagonal(Vector diag) { return Covariance(Rep{std::move(diag)}); }

  bool is_diagonal() const { return std::holds_alternative<Vector>(rep_); }

  Index dim() const {
    return is_diagonal() ? std::get<Vector>(rep_).size() : std::get<Matrix>(rep_).rows();
  }

  /// P * M
  Matrix apply(const Matrix& M) const {
    if (is_diagonal()) return std::get<Vector>(rep_).asDiagonal() * M;
    return std::get<Matrix>(rep_) * M;
  }

  Matrix dense() const {
    if (is_diagonal()) return std::get<Vector>(rep_).asDiagonal();
    return std::get<Matrix>(rep_);
  }

  /// L with L L^T = P.
  Matrix sqrt_factor() const {
    if (is_diagonal()) return std::get<Vector>(rep_).cwiseSqrt().asDiagonal();
    return psd_sqrt(std::get<Matrix>(rep_));
  }

private:
  using Rep = std::variant<Vector, Matrix>;
  explicit Covariance(Rep rep) : rep_(std::move(rep)) {}

  Rep rep_;
};

/// Observation noise N(0, Gamma) with a cached Cholesky factor.
class NoiseModel {
public:
  explicit NoiseModel(Matrix gamma) : gamma_(std::move(gamma)) {
    require_dims(gamma_.rows() == gamma_.cols(), "noise covariance must be square");
    llt_.compute(gamma_);
    if (llt_.info() != Eigen::Success) throw NotPositiveDefinite("noise covariance is not SPD");
    chol_ = llt_.matrixL();
  }

  static NoiseModel isotropic(Index k, double variance) {
    return NoiseModel(variance * Matrix::Identity(k, k));
  }

  Index dim() const { return gamma_.rows(); }
  const Matrix& gamma() const { return gamma_; }
  /// Lower-triangular L with L L^T = Gamma.
  const Matrix& chol_factor() const { return chol_; }

  double weighted_norm_sq(const Vector& r) const {
    require_dims(r.size() == dim(), "residual length");
    return llt_.matrixL().solve(r).squaredNorm();
  }
  Vector solve(const Vector& r) const { return llt_.solve(r); }
  Matrix solve(const Matrix& R) const { return llt_.solve(R); }

private:
  Matrix gamma_;
  Eigen::LLT<Matrix> llt_;
  Matrix chol_;
};

// ---------------------------------------------------------------------------
// Forward models
// ---------------------------------------------------------------------------

/// Deterministic map R^d -> R^k. Implementations must allow concurrent
/// apply() on distinct inputs unless concurrent_safe() says otherwise.
class ForwardModel {
public:
  virtual ~ForwardModel() = default;

  virtual Index input_dim() const = 0;
  virtual Index output_dim() const = 0;
  virtual Vector apply(const Vector& u) const = 0;

  virtual bool concurrent_safe() const { return true; }

  /// k x d Jacobian. Default: central differences.
  virtual Matrix jacobian(const Vector& u) const {
    const Index d = input_dim();
    Matrix J(output_dim(), d);
    for (Index j = 0; j < d; ++j) {
      const double h = 1e-6 * std::max(1.0, std::abs(u(j)));
      Vector up = u, um = u;
      up(j) += h;
      um(j) -= h;
      J.col(j) = (apply(up) - apply(um)) / (2.0 * h);
    }
    return J;
  }

  /// Hessian of output component i (d x d). Default: differences of jacobian().
  virtual Matrix component_hessian(const Vector& u, Index i) const {
    const Index d = input_dim();
    Matrix H(d, d);
    for (Index j = 0; j < d; ++j) {
      const double h = 1e-4 * std::max(1.0, std::abs(u(j)));
      Vector up = u, um = u;
      up(j) += h;
      um(j) -= h;
      H.col(j) = (jacobian(up).row(i) - jacobian(um).row(i)).transpose() / (2.0 * h);
    }
    return 0.5 * (H + H.transpose());
  }

  virtual bool is_linear() const { return false; }
};

/// G(u) = A u.
class LinearForwardModel final : public ForwardModel {
public:
  explicit LinearForwardModel(Matrix A) : A_(std::move(A)) {}

  Index input_dim() const override { return A_.cols(); }
  Index output_dim() const override { return A_.rows(); }
  Vector apply(const Vector& u) const override {
    require_dims(u.size() == A_.cols(), "linear model input");
    return A_ * u;
  }
  Matrix jacobian(const Vector&) const override { return A_; }
  Matrix component_hessian(const Vector&, Index) const override {
    return Matrix::Zero(A_.cols(), A_.cols());
  }
  bool is_linear() const override { return true; }

  const Matrix& matrix() const { return A_; }

private:
  Matrix A_;
};

/// Forward model plus noise, data and (optionally) the ground truth.
struct InverseProblem {
  std::shared_ptr<const ForwardModel> forward;
  NoiseModel noise;
  Vector y;
  std::optional<Vector> truth;
  std::string name;

  Index input_dim() const { return forward->input_dim(); }
  Index output_dim() const { return forward->output_dim(); }

  /// Indices where the truth is nonzero; empty when no truth is known.
  std::vector<Index> support() const {
    std::vector<Index> s;
    if (!truth) return s;
    for (Index i = 0; i < truth->size(); ++i)
      if ((*truth)(i) != 0.0) s.push_back(i);
    return s;
  }

  void validate() const {
    if (!forward) throw Error("inverse problem has no forward model");
    require_dims(noise.dim() == forward->output_dim(), "noise covariance vs forward output");
    require_dims(y.size() == forward->output_dim(), "data vs forward output");
    if (truth) require_dims(truth->size() == forward->input_dim(), "truth vs forward input");
  }
};

}  // namespace sparse_ekp
