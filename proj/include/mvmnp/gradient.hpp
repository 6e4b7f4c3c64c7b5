#pragma once

// Analytic score of the unnormalized augmented target
//   log g(theta, z) = log p(theta) + sum_i log N(z_i; X_i beta, Sigma(xi)),
// with the likelihood sum estimated from a random subsample A scaled by
// N/|A|. The covariance score uses, per observation with u = Sigma^{-1} eta,
//   d log N = (1/2) tr[(u u^T - Sigma^{-1}) dSigma],
// batched over the subsample and chained through the loading/scale blocks,
// the per-choice spherical-chart Jacobian, and the diagonal probit map from
// unconstrained coordinates to angles. No J^2 x J^2 matrix is ever formed.

#include "mvmnp/model.hpp"
#include "mvmnp/parallel.hpp"
#include "mvmnp/prior.hpp"
#include "mvmnp/types.hpp"

#include <cstdint>
#include <vector>

namespace mvmnp {

// Value of log g over the subsample (indices into z's columns / the design).
// The outcome indicator p(y|z) is constant in theta and omitted.
double log_g(const ChoiceStructure& sc, const DesignMatrix& design,
             const Eigen::Ref<const Vector>& theta, const Matrix& z,
             const std::vector<int>& subsample, std::int64_t n_total, const AnglePrior& prior);

// Gradient of log_g in theta = (beta, xi); length sc.theta_dim.
Vector grad_log_g(const ChoiceStructure& sc, const DesignMatrix& design,
                  const Eigen::Ref<const Vector>& theta, const Matrix& z,
                  const std::vector<int>& subsample, std::int64_t n_total,
                  const AnglePrior& prior, WorkerPool* pool = nullptr);

// Identity-covariance variant: Sigma = I_J fixed, theta reduces to beta.
double log_g_identity(const ChoiceStructure& sc, const DesignMatrix& design,
                      const Eigen::Ref<const Vector>& beta, const Matrix& z,
                      const std::vector<int>& subsample, std::int64_t n_total);

Vector grad_log_g_identity(const ChoiceStructure& sc, const DesignMatrix& design,
                           const Eigen::Ref<const Vector>& beta, const Matrix& z,
                           const std::vector<int>& subsample, std::int64_t n_total,
                           WorkerPool* pool = nullptr);

}  // namespace mvmnp
