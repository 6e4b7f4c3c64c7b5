#pragma once

// Factor covariance of the stacked latent utilities: Sigma = B B^T + D^2
// with B the J x p loading matrix stacked over choices and D = diag(d).
// Per-choice blocks of B and d come from the spherical chart, so every
// diagonal block satisfies trace(Sigma_kk) = J_k by construction.

#include "mvmnp/spherical.hpp"
#include "mvmnp/types.hpp"

namespace mvmnp {

struct FactorCovariance {
  Matrix B;      // J x p
  Vector d;      // J
  Matrix sigma;  // J x J
};

// Lower Cholesky factor of an SPD matrix, with the escalating diagonal
// jitter that was needed to factorize it (0 when none).
struct CholeskyFactor {
  Matrix L;
  double log_det = 0.0;
  double jitter = 0.0;
};

CholeskyFactor chol_spd(const Matrix& a);

// Density of N(mean, Sigma) at x given a prefactored Sigma.
double log_mvn_density(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& mean,
                       const CholeskyFactor& chol);

// Convenience overload factorizing sigma on the fly.
double log_mvn_density(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& mean,
                       const Matrix& sigma);

Matrix spd_inverse(const CholeskyFactor& chol);

// Whole-parameter charts, one angle block per choice.
Vector angles_from_unconstrained(const ChoiceStructure& sc, const Eigen::Ref<const Vector>& xi);
Vector unconstrained_from_angles(const ChoiceStructure& sc,
                                 const Eigen::Ref<const Vector>& kappa);

// Stacked psi (length n) from angles.
Vector psi_from_angles(const ChoiceStructure& sc, const Eigen::Ref<const Vector>& kappa);

// (B, d, Sigma) from stacked psi; psi_k = (vec(B_k) column-major, d_k).
FactorCovariance covariance_from_psi(const ChoiceStructure& sc, const Eigen::Ref<const Vector>& psi);

FactorCovariance assemble_covariance_from_angles(const ChoiceStructure& sc,
                                                 const Eigen::Ref<const Vector>& kappa);
FactorCovariance assemble_covariance(const ChoiceStructure& sc, const Eigen::Ref<const Vector>& xi);

// Rescales each block Sigma_kl by 1 / (c_k c_l) with c_k^2 = trace(Sigma_kk) / J_k,
// bringing an arbitrary covariance onto the trace normalization.
struct NormalizedCovariance {
  Matrix sigma;
  Vector scale;  // c_k per choice
};
NormalizedCovariance normalize_covariance(const ChoiceStructure& sc, const Matrix& sigma);

Matrix implied_correlations(const Matrix& sigma);

}  // namespace mvmnp
