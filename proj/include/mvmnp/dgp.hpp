#pragma once

// Synthetic-data generation and train/test splitting. The generator draws
// per-choice intercepts from U(-0.5, 0), fixes the first alternative
// covariate's coefficient (the price) at -0.3 (k+1) for choice k, draws any
// remaining coefficients from N(0, 0.25^2), draws the utility covariance
// from an inverse Wishart with the equicorrelated scale 1/2 (I + 11^T) and
// J + 3 degrees of freedom, generates all covariates as standard normals,
// and simulates outcomes through the latent-utility rule.
//
// The inverse-Wishart draw is a general covariance, not a factor one, so
// fitted models are intentionally misspecified relative to the generator.
// Because the outcome law is invariant to scaling each choice's utilities
// by a positive constant, the truth is reported twice: raw (as drawn) and
// as the identified pair (beta_k / c_k, Sigma_kl / (c_k c_l)) with
// c_k^2 = trace(Sigma_kk) / J_k, which satisfies the trace normalization
// the estimators impose and generates the same outcome distribution.
//
// Streams: parameters use (dgp, 0, 0); covariates of observation i use
// (dgp, 1, i) and its utility noise (dgp, 2, i), so a longer run extends a
// shorter one with the same seed row for row.

#include "mvmnp/rng.hpp"
#include "mvmnp/types.hpp"

#include <cstdint>
#include <vector>

namespace mvmnp {

struct SyntheticTruth {
  Vector beta_raw;   // generator coefficients
  Matrix sigma_raw;  // inverse-Wishart draw
  Vector scale;      // c_k per choice
  Vector beta;       // identified: beta_raw block k divided by c_k
  Matrix sigma;      // identified: trace(sigma_kk) = J_k
};

struct SyntheticData {
  Dataset data;
  SyntheticTruth truth;
  Matrix epsilon;  // N x J utility noise, filled only when requested
};

// Draws from the inverse Wishart with the given scale matrix: X such that
// X^{-1} ~ Wishart(df, scale^{-1}), by the Bartlett factorization (diagonal
// chi-square draws first in each column, then the subdiagonal normals).
Matrix inverse_wishart(double df, const Matrix& scale, Rng& rng);

SyntheticData generate_synthetic(const ChoiceStructure& sc, int n_obs, std::uint64_t seed,
                                 bool keep_noise = false);

struct SplitIndices {
  std::vector<int> train;  // ceil(train_fraction * n_obs) rows, ascending
  std::vector<int> test;   // the rest, ascending
};

// Random partition of 0..n_obs-1; train_fraction in (0, 1) and the split
// must leave at least one test row.
SplitIndices split_dataset(int n_obs, double train_fraction, std::uint64_t seed);

// Dataset restricted to the given rows, in the given order.
Dataset subset_dataset(const ChoiceStructure& sc, const Dataset& data,
                       const std::vector<int>& rows);

}  // namespace mvmnp
