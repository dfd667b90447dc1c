#pragma once

// Reproducible random streams. Every draw in the library is keyed by
// (master seed, purpose, outer index, inner index, member index), so results
// do not depend on evaluation order or thread count.

#include "sparse_ekp/core.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace sparse_ekp {

enum class Purpose : std::uint64_t {
  InitialEnsemble = 1,
  DataPerturbation = 2,
  PriorPerturbation = 3,
  ObservationNoise = 10,
  ProblemTruth = 11,
  ProblemOperator = 12,
  Generic = 99,
};

struct StreamKey {
  std::uint64_t seed = 0;
  Purpose purpose = Purpose::Generic;
  std::uint64_t outer = 0;
  std::uint64_t inner = 0;
  std::uint64_t member = 0;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

inline std::uint64_t stream_seed(const StreamKey& key) {
  std::uint64_t h = detail::splitmix64(key.seed);
  h = detail::splitmix64(h ^ static_cast<std::uint64_t>(key.purpose));
  h = detail::splitmix64(h ^ key.outer);
  h = detail::splitmix64(h ^ key.inner);
  h = detail::splitmix64(h ^ key.member);
  return h;
}

using Rng = std::mt19937_64;

inline Rng make_rng(const StreamKey& key) { return Rng(stream_seed(key)); }

inline Vector standard_normal(Index n, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector z(n);
  for (Index i = 0; i < n; ++i) z(i) = normal(rng);
  return z;
}

/// N(mean, L L^T) sampler; the factor is computed once.
class GaussianSampler {
public:
  GaussianSampler(Vector mean, const Matrix& cov) : mean_(std::move(mean)), factor_(psd_sqrt(cov)) {
    require_dims(cov.rows() == mean_.size(), "sampler mean vs covariance");
  }
  GaussianSampler(Vector mean, const Covariance& cov)
      : mean_(std::move(mean)), factor_(cov.sqrt_factor()), diagonal_(cov.is_diagonal()) {
    require_dims(cov.dim() == mean_.size(), "sampler mean vs covariance");
  }

  static GaussianSampler from_factor(Vector mean, Matrix factor) {
    GaussianSampler s;
    s.mean_ = std::move(mean);
    s.factor_ = std::move(factor);
    return s;
  }

  Index dim() const { return mean_.size(); }

  Vector draw(Rng& rng) const {
    const Vector z = standard_normal(factor_.cols(), rng);
    if (diagonal_) return mean_ + factor_.diagonal().cwiseProduct(z);
    return mean_ + factor_ * z;
  }

  /// Draw with the covariance scaled by `scale` (scale >= 0).
  Vector draw_scaled(Rng& rng, double scale) const {
    const Vector z = std::sqrt(scale) * standard_normal(factor_.cols(), rng);
    if (diagonal_) return mean_ + factor_.diagonal().cwiseProduct(z);
    return mean_ + factor_ * z;
  }

private:
  GaussianSampler() = default;

  Vector mean_;
  Matrix factor_;
  bool diagonal_ = false;
};

/// `count` i.i.d. draws of N(mean, cov) from one stream.
inline std::vector<Vector> sample_gaussian(const Vector& mean, const Matrix& cov, int count,
                                           const StreamKey& key) {
  GaussianSampler sampler(mean, cov);
  Rng rng = make_rng(key);
  std::vector<Vector> out;
  out.reserve(static_cast<std::size_t>(std::max(count, 0)));
  for (int i = 0; i < count; ++i) out.push_back(sampler.draw(rng));
  return out;
}

}  // namespace sparse_ekp
