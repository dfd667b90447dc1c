#pragma once

// Benchmark inverse problems: an underdetermined sparse linear system, a
// first-order transport equation with a closed-form solution, and a 2D
// elliptic equation with log-conductivity in a cosine basis.

#include "sparse_ekp/core.hpp"
#include "sparse_ekp/random.hpp"

#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace sparse_ekp {

/// y = G(truth) + N(0, sigma^2 I), noise drawn from the (seed, ObservationNoise) stream.
inline Vector generate_data(const ForwardModel& model, const Vector& truth, double sigma,
                            std::uint64_t seed) {
  Vector y = model.apply(truth);
  if (sigma > 0.0) {
    Rng rng = make_rng({seed, Purpose::ObservationNoise, 0, 0, 0});
    y += sigma * standard_normal(y.size(), rng);
  }
  return y;
}

/// `count` distinct indices in [0, d), sorted, from a seeded partial shuffle.
inline std::vector<Index> random_support(Index d, Index count, Rng& rng) {
  if (count > d) throw Error("sparsity exceeds dimension");
  std::vector<Index> idx(static_cast<std::size_t>(d));
  std::iota(idx.begin(), idx.end(), Index{0});
  for (Index i = 0; i < count; ++i) {
    std::uniform_int_distribution<Index> pick(i, d - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
  }
  idx.resize(static_cast<std::size_t>(count));
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Values with magnitude uniform in [lo, hi] and random sign.
inline Vector random_signed_magnitudes(Index count, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> mag(lo, hi);
  std::bernoulli_distribution sign(0.5);
  Vector v(count);
  for (Index i = 0; i < count; ++i) {
    const double m = mag(rng);
    v(i) = sign(rng) ? m : -m;
  }
  return v;
}

// ---------------------------------------------------------------------------
// Linear compressed sensing
// ---------------------------------------------------------------------------

struct LinearProblemOptions {
  Index d = 300;
  Index k = 30;
  Index sparsity = 4;
  double noise_variance = 0.01;
  double magnitude_lo = 1.0;
  double magnitude_hi = 2.0;
  std::uint64_t seed = 0;
};

struct LinearProblem {
  std::shared_ptr<const LinearForwardModel> model;
  InverseProblem problem;
  std::vector<Index> support;

  const Matrix& G() const { return model->matrix(); }
  const Vector& truth() const { return *problem.truth; }
};

inline LinearProblem make_linear_problem(const LinearProblemOptions& opt) {
  if (opt.sparsity < 0 || opt.sparsity > opt.d) throw Error("sparsity must lie in [0, d]");
  Rng op_rng = make_rng({opt.seed, Purpose::ProblemOperator, 0, 0, 0});
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix G(opt.k, opt.d);
  for (Index j = 0; j < opt.d; ++j)
    for (Index i = 0; i < opt.k; ++i) G(i, j) = normal(op_rng);

  Rng truth_rng = make_rng({opt.seed, Purpose::ProblemTruth, 0, 0, 0});
  const auto support = random_support(opt.d, opt.sparsity, truth_rng);
  const Vector values =
      random_signed_magnitudes(opt.sparsity, opt.magnitude_lo, opt.magnitude_hi, truth_rng);
  Vector truth = Vector::Zero(opt.d);
  for (std::size_t s = 0; s < support.size(); ++s) truth(support[s]) = values(static_cast<Index>(s));

  auto model = std::make_shared<const LinearForwardModel>(std::move(G));
  Vector y = generate_data(*model, truth, std::sqrt(opt.noise_variance), opt.seed);
  InverseProblem problem{model, NoiseModel::isotropic(opt.k, opt.noise_variance), std::move(y),
                         truth, "linear"};
  return LinearProblem{model, std::move(problem), support};
}

// ---------------------------------------------------------------------------
// Transport equation  d_x1 v - d_x2 v - u(x1) v = 0,  v(x1, 0) = phi(x1)
//
// Closed form: v(x1, x2) = phi(x1 + x2) exp( int_{x1+x2}^{x1} u(z) dz ),
// u(z) = sum_j a_j sin(j pi z) + b_j cos(j pi z), coefficients ordered
// (a_1..a_J, b_1..b_J).
// ---------------------------------------------------------------------------

class TransportModel final : public ForwardModel {
public:
  explicit TransportModel(Index grid = 21, Index modes = 30) : grid_(grid), modes_(modes) {
    if (grid < 2 || modes < 1) throw Error("transport grid needs >= 2 nodes and >= 1 mode");
    const double h = 1.0 / static_cast<double>(grid - 1);
    anti_x1_ = antiderivative_basis(grid, h);
    anti_sum_ = antiderivative_basis(2 * grid - 1, h);
  }

  Index input_dim() const override { return 2 * modes_; }
  Index output_dim() const override { return grid_ * grid_; }
  Index grid() const { return grid_; }
  Index modes() const { return modes_; }

  double node(Index i) const { return static_cast<double>(i) / static_cast<double>(grid_ - 1); }

  /// Output ordering: index = i2 * grid + i1 (x2 rows, x1 fastest).
  Vector apply(const Vector& coeffs) const override {
    require_dims(coeffs.size() == input_dim(), "transport coefficients");
    const Vector ux = anti_x1_ * coeffs;
    const Vector us = anti_sum_ * coeffs;
    Vector v(output_dim());
    for (Index i2 = 0; i2 < grid_; ++i2) {
      for (Index i1 = 0; i1 < grid_; ++i1) {
        const double s = node(i1) + node(i2);
        v(i2 * grid_ + i1) = std::cos(s) * std::exp(ux(i1) - us(i1 + i2));
      }
    }
    return v;
  }

  /// u(x) for the given coefficients.
  static double coefficient_function(const Vector& coeffs, double x) {
    const Index J = coeffs.size() / 2;
    double u = 0.0;
    for (Index j = 1; j <= J; ++j) {
      const double w = static_cast<double>(j) * std::numbers::pi * x;
      u += coeffs(j - 1) * std::sin(w) + coeffs(J + j - 1) * std::cos(w);
    }
    return u;
  }

private:
  /// Row q holds the antiderivative of each basis function at z = q h.
  Matrix antiderivative_basis(Index points, double h) const {
    Matrix A(points, 2 * modes_);
    for (Index q = 0; q < points; ++q) {
      const double z = static_cast<double>(q) * h;
      for (Index j = 1; j <= modes_; ++j) {
        const double jp = static_cast<double>(j) * std::numbers::pi;
        A(q, j - 1) = -std::cos(jp * z) / jp;
        A(q, modes_ + j - 1) = std::sin(jp * z) / jp;
      }
    }
    return A;
  }

  Index grid_;
  Index modes_;
  Matrix anti_x1_;
  Matrix anti_sum_;
};

/// u(x) = 1.2 (sin pi x + sin 3 pi x - sin 6 pi x - cos 3 pi x) - 0.6 (cos pi x - cos 6 pi x).
inline Vector make_transport_truth(Index modes = 30) {
  if (modes < 6) throw Error("transport truth needs at least 6 modes");
  Vector c = Vector::Zero(2 * modes);
  c(0) = 1.2;
  c(2) = 1.2;
  c(5) = -1.2;
  c(modes + 0) = -0.6;
  c(modes + 2) = -1.2;
  c(modes + 5) = 0.6;
  return c;
}

struct TransportProblemOptions {
  Index grid = 21;
  Index modes = 30;
  double sigma = 0.1;
  std::uint64_t seed = 0;
};

inline InverseProblem make_transport_problem(const TransportProblemOptions& opt = {}) {
  auto model = std::make_shared<const TransportModel>(opt.grid, opt.modes);
  Vector truth = make_transport_truth(opt.modes);
  Vector y = generate_data(*model, truth, opt.sigma, opt.seed);
  return InverseProblem{model, NoiseModel::isotropic(model->output_dim(), opt.sigma * opt.sigma),
                        std::move(y), std::move(truth), "transport"};
}

// ---------------------------------------------------------------------------
// Elliptic equation  -div(e^u grad v) = f  on [0,1]^2
//
//   v = 100 on x2 = 0, -e^u dv/dx1 = 500 on x1 = 0, zero flux on x1 = 1 and
//   x2 = 1. Five-point stencil on a uniform grid; face conductivities are
//   harmonic (or arithmetic) means of the nodal values; Neumann sides use a
//   one-sided ghost node, so a boundary face contributes only its prescribed
//   flux. Unknowns (and observations) are all nodes off the Dirichlet row,
//   ordered (j - 1) * n + i for x1 = i h, x2 = j h.
// ---------------------------------------------------------------------------

enum class FaceAveraging { Harmonic, Arithmetic };

struct EllipticSettings {
  Index grid = 15;
  Index modes = 20;
  double dirichlet_value = 100.0;
  double inflow_flux = 500.0;
  double source_low = 0.0;
  double source_mid = 137.0;
  double source_high = 274.0;
  double break_low = 4.0 / 6.0;
  double break_high = 5.0 / 6.0;
  FaceAveraging averaging = FaceAveraging::Harmonic;
};

class EllipticModel final : public ForwardModel {
public:
  using SparseMatrix = Eigen::SparseMatrix<double>;

  struct System {
    SparseMatrix A;
    Vector b;
  };

  explicit EllipticModel(EllipticSettings s = {}) : s_(s) {
    if (s_.grid < 3 || s_.modes < 1) throw Error("elliptic grid needs >= 3 nodes and >= 1 mode");
    const Index n = s_.grid;
    cos_basis_.resize(n, s_.modes);
    for (Index q = 0; q < n; ++q)
      for (Index i = 0; i < s_.modes; ++i)
        cos_basis_(q, i) = std::cos(static_cast<double>(i) * std::numbers::pi * node(q));
  }

  const EllipticSettings& settings() const { return s_; }
  Index input_dim() const override { return s_.modes * s_.modes; }
  Index output_dim() const override { return s_.grid * (s_.grid - 1); }

  double node(Index q) const { return static_cast<double>(q) / static_cast<double>(s_.grid - 1); }

  /// Nodal log-conductivity, n x n with entry (i, j) at (x1_i, x2_j).
  /// Coefficient u_ij (basis cos(i pi x1) cos(j pi x2)) sits at index i * modes + j.
  Matrix log_conductivity(const Vector& coeffs) const {
    require_dims(coeffs.size() == input_dim(), "elliptic coefficients");
    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
        C(coeffs.data(), s_.modes, s_.modes);
    return cos_basis_ * C * cos_basis_.transpose();
  }

  double source(double x2) const {
    if (x2 <= s_.break_low) return s_.source_low;
    if (x2 <= s_.break_high) return s_.source_mid;
    return s_.source_high;
  }

  double face(double ka, double kb) const {
    return s_.averaging == FaceAveraging::Harmonic ? 2.0 * ka * kb / (ka + kb) : 0.5 * (ka + kb);
  }

  Index unknown(Index i, Index j) const { return (j - 1) * s_.grid + i; }

  System assemble(const Vector& coeffs) const {
    const Index n = s_.grid;
    const double h = 1.0 / static_cast<double>(n - 1);
    const double inv_h2 = 1.0 / (h * h);
    const Matrix k = log_conductivity(coeffs).array().exp().matrix();

    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(5 * output_dim()));
    Vector b = Vector::Zero(output_dim());

    for (Index j = 1; j < n; ++j) {
      for (Index i = 0; i < n; ++i) {
        const Index row = unknown(i, j);
        double diag = 0.0;
        auto couple = [&](Index ni, Index nj) {
          const double c = face(k(i, j), k(ni, nj)) * inv_h2;
          diag += c;
          if (nj == 0) {
            b(row) += c * s_.dirichlet_value;
          } else {
            trip.emplace_back(row, unknown(ni, nj), -c);
          }
        };
        if (i > 0) couple(i - 1, j);
        if (i < n - 1) couple(i + 1, j);
        couple(i, j - 1);
        if (j < n - 1) couple(i, j + 1);
        trip.emplace_back(row, row, diag);

        b(row) += source(node(j));
        if (i == 0) b(row) += s_.inflow_flux / h;
      }
    }
    System sys{SparseMatrix(output_dim(), output_dim()), std::move(b)};
    sys.A.setFromTriplets(trip.begin(), trip.end());
    return sys;
  }

  /// Direct sparse LDL^T solve of the symmetrically Jacobi-scaled system
  /// (D^-1/2 A D^-1/2) w = D^-1/2 b, v = D^-1/2 w. The scaling keeps the
  /// factorization stable under large conductivity contrasts.
  Vector solve(const System& sys) const {
    const Vector scale = sys.A.diagonal().cwiseSqrt().cwiseInverse();
    SparseMatrix As = scale.asDiagonal() * sys.A * scale.asDiagonal();
    Eigen::SimplicialLDLT<SparseMatrix> ldlt(As);
    if (ldlt.info() != Eigen::Success) throw NotPositiveDefinite("elliptic system factorization failed");
    Vector w = ldlt.solve(Vector(scale.cwiseProduct(sys.b)));
    if (ldlt.info() != Eigen::Success) throw NotPositiveDefinite("elliptic solve failed");
    return scale.cwiseProduct(w);
  }

  Vector apply(const Vector& coeffs) const override { return solve(assemble(coeffs)); }

private:
  EllipticSettings s_;
  Matrix cos_basis_;  // n x modes
};

struct EllipticTruthOptions {
  Index nonzeros = 6;
  double magnitude_lo = 0.5;
  double magnitude_hi = 1.5;
};

inline Vector make_elliptic_truth(std::uint64_t seed, Index dim = 400,
                                  const EllipticTruthOptions& opt = {}) {
  Rng rng = make_rng({seed, Purpose::ProblemTruth, 0, 0, 0});
  const auto support = random_support(dim, opt.nonzeros, rng);
  const Vector values = random_signed_magnitudes(opt.nonzeros, opt.magnitude_lo, opt.magnitude_hi, rng);
  Vector truth = Vector::Zero(dim);
  for (std::size_t s = 0; s < support.size(); ++s) truth(support[s]) = values(static_cast<Index>(s));
  return truth;
}

struct EllipticProblemOptions {
  EllipticSettings settings;
  EllipticTruthOptions truth;
  double sigma = 0.1;
  std::uint64_t seed = 0;
};

inline InverseProblem make_elliptic_problem(const EllipticProblemOptions& opt = {}) {
  auto model = std::make_shared<const EllipticModel>(opt.settings);
  Vector truth = make_elliptic_truth(opt.seed, model->input_dim(), opt.truth);
  Vector y = generate_data(*model, truth, opt.sigma, opt.seed);
  return InverseProblem{model, NoiseModel::isotropic(model->output_dim(), opt.sigma * opt.sigma),
                        std::move(y), std::move(truth), "elliptic"};
}

}  // namespace sparse_ekp
